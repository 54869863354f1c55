//! CSV tables and SVG figures for meta-test results.
//!
//! Output is a pure function of the reports: numbers use Rust's shortest
//! round-trip formatting and nothing time- or host-dependent is written.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::binio::write_atomic;
use crate::error::{Error, Result};
use crate::eval::{winner_map, EvalReport, WinnerRow};
use crate::tasks::TaskConfig;
use crate::train::Algorithm;

pub const RESULTS_CSV: &str = "results.csv";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const ACCURACY_SVG: &str = "accuracy.svg";
pub const WINNER_SVG: &str = "winner_map.svg";

const RESULTS_HEADER: [&str; 8] = ["dataset", "split", "algorithm", "N", "T", "seed", "task_id", "accuracy"];
const AGGREGATE_HEADER: [&str; 7] = ["dataset", "algorithm", "N", "T", "mean", "std", "zero_shot_mean"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedFiles {
    pub results_csv: PathBuf,
    pub aggregate_csv: PathBuf,
    pub accuracy_svg: PathBuf,
    /// Absent when no configuration has two algorithms to compare.
    pub winner_svg: Option<PathBuf>,
}

fn csv_error(path: &Path, source: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_bytes(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.into_inner()
        .map_err(|e| Error::io(path, e.into_error()))
}

pub fn results_csv(reports: &[EvalReport]) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for r in reports {
        for (seed, accs) in r.seeds.iter().zip(&r.per_task_accuracy) {
            for (task_id, acc) in accs.iter().enumerate() {
                rows.push(vec![
                    r.dataset.clone(),
                    r.split.clone(),
                    r.algorithm.to_string(),
                    r.n.to_string(),
                    r.t.to_string(),
                    seed.to_string(),
                    task_id.to_string(),
                    acc.to_string(),
                ]);
            }
        }
    }
    csv_bytes(Path::new(RESULTS_CSV), &RESULTS_HEADER, rows)
}

pub fn aggregate_csv(reports: &[EvalReport]) -> Result<Vec<u8>> {
    let rows = reports.iter().map(|r| {
        vec![
            r.dataset.clone(),
            r.algorithm.to_string(),
            r.n.to_string(),
            r.t.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
            r.zero_shot_mean.map(|v| v.to_string()).unwrap_or_default(),
        ]
    });
    csv_bytes(Path::new(AGGREGATE_CSV), &AGGREGATE_HEADER, rows)
}

/// Writes the two CSV tables and the figures into `out_dir`, creating it.
pub fn render_reports(reports: &[EvalReport], out_dir: impl AsRef<Path>) -> Result<RenderedFiles> {
    let out_dir = out_dir.as_ref();
    if reports.is_empty() {
        return Err(Error::Usage("nothing to render: no reports".into()));
    }
    let files = RenderedFiles {
        results_csv: out_dir.join(RESULTS_CSV),
        aggregate_csv: out_dir.join(AGGREGATE_CSV),
        accuracy_svg: out_dir.join(ACCURACY_SVG),
        winner_svg: None,
    };
    write_atomic(&files.results_csv, &results_csv(reports)?)?;
    write_atomic(&files.aggregate_csv, &aggregate_csv(reports)?)?;
    write_atomic(&files.accuracy_svg, accuracy_svg(reports).as_bytes())?;
    let winner_svg = match winner_map(reports) {
        Ok(rows) => {
            let path = out_dir.join(WINNER_SVG);
            write_atomic(&path, winner_svg(&rows).as_bytes())?;
            Some(path)
        }
        Err(Error::Usage(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(RenderedFiles { winner_svg, ..files })
}

/// Rebuilds reports from a `results.csv` written by [`render_reports`].
pub fn read_results_csv(path: impl AsRef<Path>) -> Result<Vec<EvalReport>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().ne(RESULTS_HEADER.iter().copied()) {
        return Err(Error::Format(format!(
            "{}: expected header {}",
            path.display(),
            RESULTS_HEADER.join(",")
        )));
    }

    // (dataset, split, algorithm, N, T) -> seeds in order, each with its accuracies
    type Key = (String, String, Algorithm, usize, usize);
    let mut groups: Vec<(Key, Vec<(u64, Vec<f64>)>)> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let bad = |what: &str| Error::Format(format!("{}: data row {}: bad {what}", path.display(), line + 1));
        let algorithm: Algorithm = record[2].parse().map_err(|_| bad("algorithm"))?;
        let n: usize = record[3].parse().map_err(|_| bad("N"))?;
        let t: usize = record[4].parse().map_err(|_| bad("T"))?;
        let seed: u64 = record[5].parse().map_err(|_| bad("seed"))?;
        let task_id: usize = record[6].parse().map_err(|_| bad("task_id"))?;
        let acc: f64 = record[7].parse().map_err(|_| bad("accuracy"))?;
        let key = (record[0].to_string(), record[1].to_string(), algorithm, n, t);
        let idx = match groups.iter().position(|(k, _)| *k == key) {
            Some(i) => i,
            None => {
                groups.push((key, Vec::new()));
                groups.len() - 1
            }
        };
        let seeds = &mut groups[idx].1;
        if seeds.last().map(|(s, _)| *s) != Some(seed) {
            seeds.push((seed, Vec::new()));
        }
        let accs = &mut seeds.last_mut().expect("pushed above").1;
        if task_id != accs.len() {
            return Err(bad("task_id order"));
        }
        accs.push(acc);
    }

    let mut reports = Vec::with_capacity(groups.len());
    for ((dataset, split, algorithm, n, t), seeds) in groups {
        let (ids, rows): (Vec<u64>, Vec<Vec<f64>>) = seeds.into_iter().unzip();
        reports.push(
            EvalReport::from_runs(algorithm, TaskConfig { n, t }, ids, rows)?.labeled(&dataset, &split),
        );
    }
    let zero_shot: Vec<(String, String, usize, usize, f64)> = reports
        .iter()
        .filter(|r| r.algorithm == Algorithm::ZeroShot)
        .map(|r| (r.dataset.clone(), r.split.clone(), r.n, r.t, r.mean))
        .collect();
    for r in &mut reports {
        r.zero_shot_mean = zero_shot
            .iter()
            .find(|z| z.0 == r.dataset && z.1 == r.split && z.2 == r.n && z.3 == r.t)
            .map(|z| z.4);
    }
    Ok(reports)
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;

fn color(alg: Algorithm) -> &'static str {
    match alg {
        Algorithm::ZeroShot => "#7f7f7f",
        Algorithm::Classical => "#1f77b4",
        Algorithm::Mamf => "#d62728",
        Algorithm::Fomaml => "#2ca02c",
    }
}

fn svg_open(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Axes {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Axes {
    fn px(&self, x: f64) -> f64 {
        let span = if self.x1 > self.x0 { self.x1 - self.x0 } else { 1.0 };
        MARGIN + (x - self.x0) / span * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        let span = if self.y1 > self.y0 { self.y1 - self.y0 } else { 1.0 };
        HEIGHT - MARGIN - (y - self.y0) / span * (HEIGHT - 2.0 * MARGIN)
    }

    fn draw(&self, out: &mut String, x_label: &str, y_label: &str, x_ticks: &[f64], y_ticks: &[f64]) {
        let (l, r, b, t) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
        let _ = writeln!(out, r#"<path d="M{l} {t}V{b}H{r}" fill="none" stroke="black"/>"#);
        for &x in x_ticks {
            let px = self.px(x);
            let _ = writeln!(
                out,
                r#"<line x1="{px:.2}" y1="{b}" x2="{px:.2}" y2="{}" stroke="black"/><text x="{px:.2}" y="{}" text-anchor="middle">{}</text>"#,
                b + 4.0,
                b + 18.0,
                trim(x)
            );
        }
        for &y in y_ticks {
            let py = self.py(y);
            let _ = writeln!(
                out,
                r#"<line x1="{}" y1="{py:.2}" x2="{l}" y2="{py:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
                l - 4.0,
                l - 6.0,
                py + 4.0,
                trim(y)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            WIDTH / 2.0,
            HEIGHT - 16.0,
            escape(x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(y_label)
        );
    }
}

fn trim(v: f64) -> String {
    let s = format!("{v:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

fn legend(out: &mut String, algorithms: &[Algorithm]) {
    for (i, alg) in algorithms.iter().enumerate() {
        let y = MARGIN + 6.0 + 16.0 * i as f64;
        let x = WIDTH - MARGIN - 90.0;
        let _ = writeln!(
            out,
            r#"<rect x="{x}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            y - 9.0,
            color(*alg),
            x + 14.0,
            y,
            alg
        );
    }
}

fn present_algorithms(reports: impl IntoIterator<Item = Algorithm>) -> Vec<Algorithm> {
    let seen: Vec<Algorithm> = reports.into_iter().collect();
    Algorithm::ALL.into_iter().filter(|a| seen.contains(a)).collect()
}

/// Mean accuracy against `N`, one line per algorithm, with ±1 std bars.
pub fn accuracy_svg(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let datasets: Vec<&str> = {
        let mut d: Vec<&str> = reports.iter().map(|r| r.dataset.as_str()).collect();
        d.dedup();
        d
    };
    let title = format!("Meta-test accuracy: {}", datasets.join(", "));
    svg_open(&mut out, &title);
    let n_min = reports.iter().map(|r| r.n).min().unwrap_or(2) as f64;
    let n_max = reports.iter().map(|r| r.n).max().unwrap_or(2) as f64;
    let axes = Axes {
        x0: n_min - 0.5,
        x1: n_max + 0.5,
        y0: 0.0,
        y1: 1.0,
    };
    let x_ticks: Vec<f64> = (n_min as usize..=n_max as usize).map(|n| n as f64).collect();
    axes.draw(&mut out, "N (ways per training task)", "mean query accuracy", &x_ticks, &[0.0, 0.25, 0.5, 0.75, 1.0]);
    let algorithms = present_algorithms(reports.iter().map(|r| r.algorithm));
    for alg in &algorithms {
        let mut points: Vec<&EvalReport> = reports.iter().filter(|r| r.algorithm == *alg).collect();
        points.sort_by_key(|r| r.n);
        let path: Vec<String> = points
            .iter()
            .map(|r| format!("{:.2},{:.2}", axes.px(r.n as f64), axes.py(r.mean)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            path.join(" "),
            color(*alg)
        );
        for r in points {
            let (x, y) = (axes.px(r.n as f64), axes.py(r.mean));
            let (lo, hi) = (axes.py((r.mean - r.std).max(0.0)), axes.py((r.mean + r.std).min(1.0)));
            let _ = writeln!(
                out,
                r#"<line x1="{x:.2}" y1="{lo:.2}" x2="{x:.2}" y2="{hi:.2}" stroke="{c}"/><circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{c}"/>"#,
                c = color(*alg)
            );
        }
    }
    legend(&mut out, &algorithms);
    out.push_str("</svg>\n");
    out
}

/// One marker per configuration at (zero-shot accuracy, N), coloured by the
/// winning algorithm; tied winners are drawn side by side.
pub fn winner_svg(rows: &[WinnerRow]) -> String {
    let mut out = String::new();
    svg_open(&mut out, "Best algorithm per configuration");
    let xs: Vec<f64> = rows.iter().filter_map(|r| r.zero_shot_mean).collect();
    let (x0, x1) = if xs.is_empty() {
        (0.0, 1.0)
    } else {
        let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        ((lo - 0.05).max(0.0), (hi + 0.05).min(1.0))
    };
    let n_min = rows.iter().map(|r| r.n).min().unwrap_or(2);
    let n_max = rows.iter().map(|r| r.n).max().unwrap_or(2);
    let axes = Axes {
        x0,
        x1,
        y0: n_min as f64 - 0.5,
        y1: n_max as f64 + 0.5,
    };
    let x_ticks: Vec<f64> = (0..=4).map(|i| x0 + (x1 - x0) * i as f64 / 4.0).collect();
    let y_ticks: Vec<f64> = (n_min..=n_max).map(|n| n as f64).collect();
    axes.draw(&mut out, "zero-shot accuracy", "N", &x_ticks, &y_ticks);
    for r in rows {
        let Some(zs) = r.zero_shot_mean else { continue };
        let (x, y) = (axes.px(zs), axes.py(r.n as f64));
        for (i, alg) in r.winners.iter().enumerate() {
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="8" height="8" fill="{}"><title>{} N={} T={}: {}</title></rect>"#,
                x - 4.0 + 9.0 * i as f64,
                y - 4.0,
                color(*alg),
                escape(&r.dataset),
                r.n,
                r.t,
                alg
            );
        }
    }
    legend(&mut out, &present_algorithms(rows.iter().flat_map(|r| r.winners.iter().copied())));
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_reports() -> Vec<EvalReport> {
        let mut out = Vec::new();
        for (alg, base) in [(Algorithm::ZeroShot, 0.4), (Algorithm::Classical, 0.5), (Algorithm::Mamf, 0.6)] {
            for n in [2, 3] {
                let rows = vec![vec![base, base + 0.1, 0.25], vec![base, 1.0, 0.5]];
                out.push(
                    EvalReport::from_runs(alg, TaskConfig { n, t: 3 }, vec![0, 1], rows)
                        .unwrap()
                        .labeled("toy", "test"),
                );
            }
        }
        let zs: Vec<f64> = out.iter().filter(|r| r.algorithm == Algorithm::ZeroShot).map(|r| r.mean).collect();
        for r in &mut out {
            r.zero_shot_mean = Some(zs[r.n - 2]);
        }
        out
    }

    #[test]
    fn results_csv_has_one_row_per_task() {
        let reports = sample_reports();
        let text = String::from_utf8(results_csv(&reports).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "dataset,split,algorithm,N,T,seed,task_id,accuracy");
        assert_eq!(lines.len(), 1 + 6 * 2 * 3);
        assert_eq!(lines[1], "toy,test,zeroshot,2,3,0,0,0.4");
    }

    #[test]
    fn render_creates_directory_and_is_reproducible() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("nested/out");
        let reports = sample_reports();
        let files = render_reports(&reports, &dir).unwrap();
        let first: Vec<Vec<u8>> = [&files.results_csv, &files.aggregate_csv, &files.accuracy_svg]
            .iter()
            .map(|p| std::fs::read(p).unwrap())
            .collect();
        let again = render_reports(&reports, &dir).unwrap();
        assert_eq!(files, again);
        for (p, bytes) in [&files.results_csv, &files.aggregate_csv, &files.accuracy_svg].iter().zip(first) {
            assert_eq!(std::fs::read(p).unwrap(), bytes);
        }
        let svg = std::fs::read_to_string(files.winner_svg.unwrap()).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        let leftovers: Vec<_> = std::fs::read_dir(&dir)
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }

    #[test]
    fn results_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let reports = sample_reports();
        let files = render_reports(&reports, tmp.path()).unwrap();
        let back = read_results_csv(&files.results_csv).unwrap();
        assert_eq!(back, reports);
    }

    #[test]
    fn aggregate_matches_reports() {
        let reports = sample_reports();
        let text = String::from_utf8(aggregate_csv(&reports).unwrap()).unwrap();
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        for (rec, r) in rdr.records().zip(&reports) {
            let rec = rec.unwrap();
            assert_eq!(rec[4].parse::<f64>().unwrap(), r.mean);
            assert_eq!(rec[5].parse::<f64>().unwrap(), r.std);
        }
    }

    #[test]
    fn single_algorithm_skips_winner_map() {
        let tmp = tempfile::tempdir().unwrap();
        let reports: Vec<EvalReport> = sample_reports().into_iter().filter(|r| r.algorithm == Algorithm::Mamf).collect();
        let files = render_reports(&reports, tmp.path()).unwrap();
        assert!(files.winner_svg.is_none());
    }

    #[test]
    fn rejects_foreign_csv() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("x.csv");
        std::fs::write(&p, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_results_csv(&p), Err(Error::Format(_))));
    }
}
