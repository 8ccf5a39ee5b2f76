use cardiofair::dataset::{mix_seed, read_dataset, write_dataset, generate_dataset, DatasetSpec, Split};
use cardiofair::phantom::{generate_subject, Frame, PhantomParams};
use cardiofair::Group;

fn heart_mean(s: &cardiofair::phantom::LabeledSubject) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for f in Frame::ALL {
        for (&v, &l) in s.frame(f).iter().zip(s.mask(f).iter()) {
            if l > 0 {
                sum += v as f64;
                n += 1;
            }
        }
    }
    sum / n as f64
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var)
}

#[test]
fn groups_have_indistinguishable_hearts_over_many_subjects() {
    let params = PhantomParams::default();
    let n = 1000;
    let per_group = |name: &str, salt: u64| -> Vec<f64> {
        (0..n)
            .map(|i| heart_mean(&generate_subject(mix_seed(salt + i as u64), &Group::from(name), &params).unwrap()))
            .collect()
    };
    let (ma, va) = mean_var(&per_group("A", 1 << 32));
    let (mb, vb) = mean_var(&per_group("B", 2 << 32));
    let se = (va / n as f64 + vb / n as f64).sqrt();
    assert!((ma - mb).abs() < 2.0 * se, "difference {} vs 2 SE {}", (ma - mb).abs(), 2.0 * se);
}

#[test]
fn cohort_on_disk_round_trips() {
    let mut spec = DatasetSpec::default();
    spec.train = [(Group::from("A"), 3), (Group::from("B"), 2)].into();
    spec.internal = [(Group::from("A"), 1), (Group::from("B"), 1)].into();
    spec.external = [(Group::from("B"), 2)].into();
    let data = generate_dataset(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&data, dir.path()).unwrap();
    let back = read_dataset(dir.path(), None).unwrap();
    for split in Split::ALL {
        let (a, b) = (data.split(split), back.split(split));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.subject_id, y.subject_id);
            assert_eq!(x.frames, y.frames);
            assert_eq!(x.masks, y.masks);
            assert_eq!(x.spacing_mm, y.spacing_mm);
        }
    }
    let only = read_dataset(dir.path(), Some(Split::External)).unwrap();
    assert!(only.split(Split::Train).is_empty());
    assert_eq!(only.split(Split::External).len(), 2);
}
