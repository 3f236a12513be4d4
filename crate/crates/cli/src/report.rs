//! Markdown tables and plot data from the artifacts of earlier runs.
//!
//! Needs `summary.csv`; `sensitivity.csv` and `records_*.csv` add the
//! threshold and boundary sections when present. Output depends only on
//! the bytes of those files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use stochbound::montecarlo::SUMMARY_HEADER;

use crate::commands::SENSITIVITY_HEADER;
use crate::error::CliError;

#[derive(Debug, Clone)]
struct SummaryRow {
    group: String,
    lambda: f64,
    lambda_text: String,
    method: String,
    bias: f64,
    rmse: f64,
    coverage: f64,
}

fn parse_f(field: &str, what: &str, line: usize) -> Result<f64, CliError> {
    field
        .parse()
        .map_err(|_| CliError::Runtime(format!("summary.csv:{line}: bad {what} {field:?}")))
}

fn read_summary(text: &str) -> Result<Vec<SummaryRow>, CliError> {
    let mut lines = text.lines();
    if lines.next() != Some(SUMMARY_HEADER) {
        return Err(CliError::Runtime("summary.csv has an unexpected header".into()));
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != SUMMARY_HEADER.split(',').count() {
            return Err(CliError::Runtime(format!("summary.csv:{}: wrong number of fields", k + 2)));
        }
        rows.push(SummaryRow {
            group: format!("Panel {} (ρ = {}, {}, N = {}, T = {})", f[0], f[2], f[3], f[4], f[5]),
            lambda: parse_f(f[1], "jump intensity", k + 2)?,
            lambda_text: f[1].to_string(),
            method: f[6].to_string(),
            bias: parse_f(f[7], "bias", k + 2)?,
            rmse: parse_f(f[8], "rmse", k + 2)?,
            coverage: parse_f(f[9], "coverage", k + 2)?,
        });
    }
    Ok(rows)
}

fn first_seen<'a>(items: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for s in items {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

fn render_tables(rows: &[SummaryRow], md: &mut String) {
    for group in first_seen(rows.iter().map(|r| r.group.as_str())) {
        let in_group: Vec<&SummaryRow> = rows.iter().filter(|r| r.group == group).collect();
        let methods = first_seen(in_group.iter().map(|r| r.method.as_str()));
        let mut lambdas: Vec<(f64, &str)> = Vec::new();
        for r in &in_group {
            if !lambdas.iter().any(|l| l.1 == r.lambda_text) {
                lambdas.push((r.lambda, &r.lambda_text));
            }
        }
        lambdas.sort_by(|a, b| a.0.total_cmp(&b.0));
        let _ = writeln!(md, "## {group}\n");
        let mut header = String::from("| λ |");
        let mut rule = String::from("|---|");
        for m in &methods {
            let _ = write!(header, " {m} bias | {m} RMSE | {m} coverage |");
            rule.push_str("---:|---:|---:|");
        }
        let _ = writeln!(md, "{header}\n{rule}");
        for (_, text) in &lambdas {
            let mut line = format!("| {text} |");
            for m in &methods {
                match in_group.iter().find(|r| r.lambda_text == *text && r.method == *m) {
                    Some(r) => {
                        let _ = write!(line, " {:+.3} | {:.3} | {:.2} |", r.bias, r.rmse, r.coverage);
                    }
                    None => line.push_str(" | | |"),
                }
            }
            let _ = writeln!(md, "{line}");
        }
        md.push('\n');
    }
}

fn render_sensitivity(text: &str, md: &mut String) -> Result<String, CliError> {
    let mut lines = text.lines();
    if lines.next() != Some(SENSITIVITY_HEADER) {
        return Err(CliError::Runtime("sensitivity.csv has an unexpected header".into()));
    }
    let _ = writeln!(md, "## Threshold sensitivity\n\n| h | coverage | detection power | type-I rate | reps |\n|---:|---:|---:|---:|---:|");
    let mut plot = format!("{SENSITIVITY_HEADER}\n");
    for (k, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(CliError::Runtime(format!("sensitivity.csv:{}: wrong number of fields", k + 2)));
        }
        let num = |i: usize| -> Result<f64, CliError> {
            f[i].parse().map_err(|_| CliError::Runtime(format!("sensitivity.csv:{}: bad number {:?}", k + 2, f[i])))
        };
        let _ = writeln!(md, "| {} | {:.2} | {:.2} | {:.2} | {} |", f[0], num(1)?, num(2)?, num(3)?, f[4]);
        plot.push_str(line);
        plot.push('\n');
    }
    md.push('\n');
    Ok(plot)
}

/// `(file, rep, s_star_true, s_star_hat, abs_error)` for boundary-aware rows
/// that carry both a truth and an estimate.
fn boundary_points(dir: &Path, files: &[String]) -> Result<String, CliError> {
    let mut plot = String::from("file,rep,s_star_true,s_star_hat,abs_error\n");
    for name in files {
        let text = fs::read_to_string(dir.join(name))?;
        for r in stochbound::montecarlo::read_records_csv(&text)? {
            if r.method != stochbound::montecarlo::Method::DdpmBoundary {
                continue;
            }
            if let (Some(t), Some(h)) = (r.s_star_true, r.s_star_hat) {
                let _ = writeln!(plot, "{name},{},{t:?},{h:?},{:?}", r.rep, (h - t).abs());
            }
        }
    }
    Ok(plot)
}

pub fn run(dir: &Path) -> Result<(), CliError> {
    if !dir.is_dir() {
        return Err(CliError::Missing(vec![dir.display().to_string(), "summary.csv".into()]));
    }
    let summary_path = dir.join("summary.csv");
    if !summary_path.is_file() {
        return Err(CliError::Missing(vec!["summary.csv".into()]));
    }
    let rows = read_summary(&fs::read_to_string(&summary_path)?)?;
    let mut md = String::from("# Monte Carlo report\n\n");
    render_tables(&rows, &mut md);

    let mut curves = String::from("group,method,jump_intensity,bias,abs_bias,rmse,coverage\n");
    let mut by_group: BTreeMap<(usize, usize), Vec<&SummaryRow>> = BTreeMap::new();
    let groups = first_seen(rows.iter().map(|r| r.group.as_str()));
    let methods = first_seen(rows.iter().map(|r| r.method.as_str()));
    for r in &rows {
        let g = groups.iter().position(|g| *g == r.group).expect("seen");
        let m = methods.iter().position(|m| *m == r.method).expect("seen");
        by_group.entry((g, m)).or_default().push(r);
    }
    for list in by_group.values_mut() {
        list.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
        for r in list.iter() {
            let _ = writeln!(
                curves,
                "\"{}\",{},{},{:?},{:?},{:?},{:?}",
                r.group, r.method, r.lambda_text, r.bias, r.bias.abs(), r.rmse, r.coverage
            );
        }
    }

    let mut outputs: Vec<(&str, String)> = vec![("report_bias_coverage.csv", curves)];
    let sens_path = dir.join("sensitivity.csv");
    if sens_path.is_file() {
        let plot = render_sensitivity(&fs::read_to_string(&sens_path)?, &mut md)?;
        outputs.push(("report_threshold.csv", plot));
    }
    let mut record_files: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
        .filter(|n| n.starts_with("records_") && n.ends_with(".csv"))
        .collect();
    record_files.sort();
    if !record_files.is_empty() {
        let plot = boundary_points(dir, &record_files)?;
        let n_points = plot.lines().count() - 1;
        if n_points > 0 {
            let _ = writeln!(md, "## Boundary estimates\n\n{n_points} replication(s) with both a true and an estimated boundary; see `report_boundary.csv`.\n");
            outputs.push(("report_boundary.csv", plot));
        }
    }
    outputs.push(("report.md", md));
    for (name, body) in outputs {
        fs::write(dir.join(name), body)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(lambdas: &[&str], methods: &[&str]) -> String {
        let mut s = format!("{SUMMARY_HEADER}\n");
        for l in lambdas {
            for m in methods {
                s.push_str(&format!("A,{l},0.3,sparse,100,20,{m},-0.01,0.05,0.94,0.2,0.003,200,0,,,\n"));
            }
        }
        s
    }

    #[test]
    fn a_full_lambda_grid_gives_one_row_per_intensity() {
        let rows = read_summary(&summary(&["1", "0", "0.5", "0.1"], &["sar", "ddpm_boundary"])).unwrap();
        let mut md = String::new();
        render_tables(&rows, &mut md);
        let body: Vec<&str> = md.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| λ")).collect();
        assert_eq!(body.len(), 4);
        assert!(body[0].starts_with("| 0 |") && body[3].starts_with("| 1 |"));
        assert!(md.contains("sar bias") && md.contains("ddpm_boundary coverage"));
    }

    #[test]
    fn a_foreign_header_is_rejected() {
        assert!(read_summary("a,b\n1,2\n").is_err());
    }
}
