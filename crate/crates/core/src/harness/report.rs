//! Comparison tables (CSV and markdown) and score-distribution plots.

use super::{io_error, svg, ExperimentResult, HarnessError};
use crate::dataset::Split;
use crate::metrics::{read_scores_csv, FairnessReport};
use crate::Group;
use std::collections::BTreeSet;
use std::fmt::Write;
use std::path::{Path, PathBuf};

/// Row labels of the comparison table, in order.
pub const TABLE_ROWS: [&str; 7] = [
    "Median DSC",
    "IQR DSC",
    "Median HD (mm)",
    "IQR HD (mm)",
    "SER",
    "Fairness gap",
    "p",
];

pub const SIGNIFICANCE: f64 = 0.05;

/// Files written by [`render_report`].
#[derive(Debug, Clone, Default)]
pub struct ReportFiles {
    pub tables_csv: Vec<PathBuf>,
    pub tables_md: Vec<PathBuf>,
    pub plots: Vec<PathBuf>,
    pub seeds_csv: PathBuf,
}

fn fmt3(v: f64) -> String {
    if v.is_nan() {
        "n/a".into()
    } else if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.3}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), fmt3)
}

fn fmt_p(p: f64) -> String {
    let star = if p < SIGNIFICANCE { "*" } else { "" };
    if p < 1e-3 {
        format!("<0.001{star}")
    } else {
        format!("{p:.3}{star}")
    }
}

/// Groups shown for a report: majority first, then minority, then the rest.
fn ordered_groups(r: &FairnessReport) -> Vec<Group> {
    let mut out = vec![r.majority.clone(), r.minority.clone()];
    out.extend(r.groups.keys().filter(|g| **g != r.majority && **g != r.minority).cloned());
    out
}

/// The table as rows of cells: header row first, then [`TABLE_ROWS`].
pub fn table_cells(results: &[&ExperimentResult], split: Split) -> Vec<Vec<String>> {
    let mut header = vec![String::new()];
    let mut cols: Vec<(&FairnessReport, Group, bool)> = Vec::new();
    for r in results {
        let Some(rep) = r.pooled.get(&split) else { continue };
        for (k, g) in ordered_groups(rep).into_iter().enumerate() {
            header.push(format!("{} {}", r.name, g));
            cols.push((rep, g, k == 0));
        }
    }
    let mut rows = vec![header];
    for name in TABLE_ROWS {
        let mut row = vec![name.to_string()];
        for (rep, g, first) in &cols {
            let s = &rep.groups[g];
            row.push(match name {
                "Median DSC" => fmt3(s.median_dsc),
                "IQR DSC" => fmt3(s.iqr_dsc),
                "Median HD (mm)" => fmt_opt(s.median_hd),
                "IQR HD (mm)" => fmt_opt(s.iqr_hd),
                "SER" if *first => fmt3(rep.ser),
                "Fairness gap" if *first => fmt3(rep.fairness_gap),
                "p" if *first => fmt_p(rep.mwu_p),
                _ => String::new(),
            });
        }
        rows.push(row);
    }
    rows
}

fn csv_line(cells: &[String]) -> String {
    let quoted: Vec<String> = cells
        .iter()
        .map(|c| {
            if c.contains([',', '"']) {
                format!("\"{}\"", c.replace('"', "\"\""))
            } else {
                c.clone()
            }
        })
        .collect();
    quoted.join(",")
}

/// Markdown table; the best median DSC of each group is bold.
pub fn markdown_table(results: &[&ExperimentResult], split: Split) -> String {
    let cells = table_cells(results, split);
    let mut best: std::collections::BTreeMap<Group, f64> = Default::default();
    for r in results {
        if let Some(rep) = r.pooled.get(&split) {
            for (g, s) in &rep.groups {
                let b = best.entry(g.clone()).or_insert(f64::NEG_INFINITY);
                *b = b.max(s.median_dsc);
            }
        }
    }
    let mut col_groups = Vec::new();
    for r in results {
        if let Some(rep) = r.pooled.get(&split) {
            for g in ordered_groups(rep) {
                col_groups.push((rep.groups[&g].median_dsc, g));
            }
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "| {} |", cells[0].join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(cells[0].len()));
    for row in &cells[1..] {
        let mut row = row.clone();
        if row[0] == "Median DSC" {
            for (k, (v, g)) in col_groups.iter().enumerate() {
                if *v == best[g] && results.len() > 1 {
                    row[k + 1] = format!("**{}**", row[k + 1]);
                }
            }
        }
        let _ = writeln!(out, "| {} |", row.join(" | "));
    }
    out
}

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(io_error(path))
}

/// Renders tables and plots for every split covered by the results found in
/// `result_dirs` (each holding a `result.json`).
pub fn render_report(result_dirs: &[PathBuf], out: &Path) -> Result<ReportFiles, HarnessError> {
    if result_dirs.is_empty() {
        return Err(HarnessError::EmptyResults);
    }
    let results: Vec<ExperimentResult> = result_dirs
        .iter()
        .map(|d| ExperimentResult::load(d))
        .collect::<Result<_, _>>()?;
    std::fs::create_dir_all(out).map_err(io_error(out))?;
    let refs: Vec<&ExperimentResult> = results.iter().collect();
    let mut files = ReportFiles::default();
    let splits: BTreeSet<Split> = results.iter().flat_map(|r| r.pooled.keys().copied()).collect();
    for split in splits {
        let cells = table_cells(&refs, split);
        let csv: String = cells.iter().map(|r| csv_line(r) + "\n").collect();
        let p = out.join(format!("table_{split}.csv"));
        write(&p, &csv)?;
        files.tables_csv.push(p);
        let p = out.join(format!("table_{split}.md"));
        write(&p, &markdown_table(&refs, split))?;
        files.tables_md.push(p);

        // Per-group overall DSC distributions from the pooled scores.
        let mut series: Vec<Group> = Vec::new();
        let mut cats = Vec::new();
        for (dir, r) in result_dirs.iter().zip(&results) {
            let Some(rep) = r.pooled.get(&split) else { continue };
            let scores = read_scores_csv(&dir.join("pooled").join(split.name()).join("scores.csv"))?;
            let groups = ordered_groups(rep);
            for g in &groups {
                if !series.contains(g) {
                    series.push(g.clone());
                }
            }
            let per: Vec<Vec<f64>> = series
                .iter()
                .map(|g| scores.iter().filter(|s| &s.group == g).map(|s| s.overall_dsc).collect())
                .collect();
            cats.push((r.name.clone(), per));
        }
        let names: Vec<String> = series.iter().map(|g| g.to_string()).collect();
        let p = out.join(format!("dsc_{split}.svg"));
        write(
            &p,
            &svg::box_plot(&format!("Overall DSC per group ({split})"), "DSC", &names, &cats),
        )?;
        files.plots.push(p);
    }

    let mut seeds = String::from("experiment,split,seed,group,n,median_dsc,iqr_dsc,median_hd,iqr_hd,fairness_gap,ser,mwu_p,bbox_median_x,bbox_median_y\n");
    for r in &results {
        for s in &r.per_seed {
            for (split, rep) in &s.reports {
                let bbox = s.bbox_error.get(split);
                for g in ordered_groups(rep) {
                    let gs = &rep.groups[&g];
                    let _ = writeln!(
                        seeds,
                        "{},{},{},{},{},{:?},{:?},{},{},{:?},{:?},{:?},{},{}",
                        r.name,
                        split,
                        s.seed,
                        g,
                        gs.n,
                        gs.median_dsc,
                        gs.iqr_dsc,
                        gs.median_hd.map(|v| format!("{v:?}")).unwrap_or_default(),
                        gs.iqr_hd.map(|v| format!("{v:?}")).unwrap_or_default(),
                        rep.fairness_gap,
                        rep.ser,
                        rep.mwu_p,
                        bbox.map(|b| format!("{:?}", b.median_x)).unwrap_or_default(),
                        bbox.map(|b| format!("{:?}", b.median_y)).unwrap_or_default(),
                    );
                }
            }
        }
    }
    files.seeds_csv = out.join("seeds.csv");
    write(&files.seeds_csv, &seeds)?;
    Ok(files)
}
