//! Static SVG line plots of the protection trade-off, rendered from the CSV.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use plotters::prelude::*;

/// One seed-averaged point of the trade-off table.
#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub l: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub accuracy: f64,
}

/// Reads a protection CSV and averages seeds, keyed by `selection/replacement`.
pub fn read_tradeoff(csv: &str) -> Result<BTreeMap<String, Vec<Point>>> {
    let mut cells: BTreeMap<String, BTreeMap<u64, (Point, usize)>> = BTreeMap::new();
    let mut lines = csv.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.starts_with("selection,replacement,L,seed") => {}
        _ => bail!("not a protection table: missing header"),
    }
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            bail!("row {}: expected 8 columns, found {}", i + 2, f.len());
        }
        let num = |j: usize| f[j].parse::<f64>().with_context(|| format!("row {}: bad number `{}`", i + 2, f[j]));
        let l = num(2)?;
        let key = format!("{}/{}", f[0], f[1]);
        let entry = cells.entry(key).or_default().entry(l.to_bits()).or_insert((Point { l, recall: 0.0, ndcg: 0.0, accuracy: 0.0 }, 0));
        entry.0.recall += num(4)?;
        entry.0.ndcg += num(5)?;
        entry.0.accuracy += num(7)?;
        entry.1 += 1;
    }
    Ok(cells
        .into_iter()
        .map(|(k, pts)| {
            let mut v: Vec<Point> = pts
                .into_values()
                .map(|(p, c)| Point { l: p.l, recall: p.recall / c as f64, ndcg: p.ndcg / c as f64, accuracy: p.accuracy / c as f64 })
                .collect();
            v.sort_by(|a, b| a.l.total_cmp(&b.l));
            (k, v)
        })
        .collect())
}

fn line_plot(path: &Path, title: &str, y_label: &str, series: &BTreeMap<String, Vec<Point>>, y: fn(&Point) -> f64) -> Result<()> {
    let y_max = series.values().flatten().map(y).fold(0.0_f64, f64::max).max(1e-3) * 1.05;
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..1.0, 0.0..y_max)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    chart
        .configure_mesh()
        .x_desc("replacement proportion L")
        .y_desc(y_label)
        .draw()
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().map(|p| (p.l, y(p))), color.stroke_width(2)))
            .map_err(|e| anyhow::anyhow!("{e}"))?
            .label(name.clone())
            .legend(move |(x, yy)| PathElement::new(vec![(x, yy), (x + 18, yy)], color.stroke_width(2)));
        chart
            .draw_series(pts.iter().map(|p| Circle::new((p.l, y(p)), 3, color.filled())))
            .map_err(|e| anyhow::anyhow!("{e}"))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    root.present().map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok(())
}

/// Writes `recall.svg`, `ndcg.svg` and `accuracy.svg` into `out_dir`.
pub fn render(series: &BTreeMap<String, Vec<Point>>, k: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let plots: [(&str, String, String, fn(&Point) -> f64); 3] = [
        ("recall.svg", format!("Attack Recall*@{k} under protection"), format!("Recall*@{k}"), |p| p.recall),
        ("ndcg.svg", format!("Attack NDCG*@{k} under protection"), format!("NDCG*@{k}"), |p| p.ndcg),
        ("accuracy.svg", "Recommendation accuracy under protection".to_string(), "acc*".to_string(), |p| p.accuracy),
    ];
    let mut written = Vec::new();
    for (file, title, label, y) in plots {
        let path = out_dir.join(file);
        line_plot(&path, &title, &label, series, y).with_context(|| format!("rendering {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}

/// `k` from the `# k=…` comment line, if present.
pub fn k_of(csv: &str) -> Option<usize> {
    csv.lines()
        .filter(|l| l.starts_with('#'))
        .flat_map(|l| l.split_whitespace())
        .find_map(|tok| tok.strip_prefix("k=").and_then(|v| v.parse().ok()))
}
