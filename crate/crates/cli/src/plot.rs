//! Minimal SVG emission for study tables: scatter plots over a log-scaled
//! score axis and ratio/metric line plots. Rows with an infinite score are
//! drawn as rug marks on the right edge rather than dropped.

use archvuln::evalkit::{StudyKind, StudyRow, StudyTable};
use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 440.0;
const ML: f64 = 70.0;
const MR: f64 = 60.0;
const MT: f64 = 40.0;
const MB: f64 = 60.0;

struct Canvas {
    svg: String,
}

impl Canvas {
    fn new(title: &str) -> Canvas {
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
        );
        let _ = writeln!(svg, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{}</text>",
            W / 2.0,
            escape(title)
        );
        let _ = writeln!(
            svg,
            "<rect x=\"{ML}\" y=\"{MT}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>",
            W - ML - MR,
            H - MT - MB
        );
        Canvas { svg }
    }

    fn x(&self, t: f64) -> f64 {
        ML + t.clamp(0.0, 1.0) * (W - ML - MR)
    }

    fn y(&self, t: f64) -> f64 {
        H - MB - t.clamp(0.0, 1.0) * (H - MT - MB)
    }

    fn circle(&mut self, tx: f64, ty: f64, color: &str) {
        let _ = writeln!(
            self.svg,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{color}\" fill-opacity=\"0.75\"/>",
            self.x(tx),
            self.y(ty)
        );
    }

    fn rug_right(&mut self, ty: f64, color: &str) {
        let x = W - MR + 6.0;
        let _ = writeln!(
            self.svg,
            "<line x1=\"{x}\" y1=\"{:.2}\" x2=\"{}\" y2=\"{:.2}\" stroke=\"{color}\" stroke-width=\"2.5\"/>",
            self.y(ty),
            x + 12.0,
            self.y(ty)
        );
    }

    fn polyline(&mut self, pts: &[(f64, f64)], color: &str) {
        let coords: Vec<String> = pts
            .iter()
            .map(|(tx, ty)| format!("{:.2},{:.2}", self.x(*tx), self.y(*ty)))
            .collect();
        let _ = writeln!(
            self.svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            coords.join(" ")
        );
    }

    fn text(&mut self, px: f64, py: f64, size: f64, anchor: &str, body: &str) {
        let _ = writeln!(
            self.svg,
            "<text x=\"{px:.2}\" y=\"{py:.2}\" font-family=\"sans-serif\" font-size=\"{size}\" text-anchor=\"{anchor}\">{}</text>",
            escape(body)
        );
    }

    fn x_tick(&mut self, t: f64, label: &str) {
        let px = self.x(t);
        let _ = writeln!(
            self.svg,
            "<line x1=\"{px:.2}\" y1=\"{}\" x2=\"{px:.2}\" y2=\"{}\" stroke=\"#444\"/>",
            H - MB,
            H - MB + 5.0
        );
        self.text(px, H - MB + 20.0, 11.0, "middle", label);
    }

    fn y_tick(&mut self, t: f64, label: &str) {
        let py = self.y(t);
        let _ = writeln!(
            self.svg,
            "<line x1=\"{}\" y1=\"{py:.2}\" x2=\"{ML}\" y2=\"{py:.2}\" stroke=\"#444\"/>",
            ML - 5.0
        );
        self.text(ML - 9.0, py + 4.0, 11.0, "end", label);
    }

    fn finish(mut self, x_label: &str, y_label: &str) -> String {
        self.text(ML + (W - ML - MR) / 2.0, H - 18.0, 13.0, "middle", x_label);
        let _ = writeln!(
            self.svg,
            "<text x=\"20\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 20 {:.2})\">{}</text>",
            MT + (H - MT - MB) / 2.0,
            MT + (H - MT - MB) / 2.0,
            escape(y_label)
        );
        self.svg + "</svg>\n"
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Scatter of the score against one metric, the score on a log10 axis and
/// infinite scores as rug marks at the right edge.
pub fn scatter_svg(rows: &[StudyRow], metric: fn(&StudyRow) -> f64, title: &str, y_label: &str) -> String {
    let finite: Vec<&StudyRow> =
        rows.iter().filter(|r| r.kappa.is_finite() && r.note.is_empty()).collect();
    let infinite: Vec<&StudyRow> =
        rows.iter().filter(|r| r.kappa.is_infinite() && r.note.is_empty()).collect();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in &finite {
        lo = lo.min(r.kappa.log10());
        hi = hi.max(r.kappa.log10());
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-9 {
        hi = lo + 1.0;
    }

    let mut c = Canvas::new(title);
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let v = lo + t * (hi - lo);
        c.x_tick(t, &format!("{:.1}", v));
        c.y_tick(t, &format!("{:.2}", t));
    }
    for r in &finite {
        let tx = (r.kappa.log10() - lo) / (hi - lo);
        c.circle(tx, metric(r), "#1f77b4");
    }
    for r in &infinite {
        c.rug_right(metric(r), "#d62728");
    }
    if !infinite.is_empty() {
        c.text(W - MR + 6.0, MT - 8.0, 11.0, "start", &format!("inf x{}", infinite.len()));
    }
    c.finish("log10(score)", y_label)
}

/// Ratio/metric line plot: ASR and ACC as functions of the poisoning ratio,
/// the ratio spaced by rank to keep tiny ratios visible.
pub fn poison_line_svg(rows: &[StudyRow], title: &str) -> String {
    let mut ordered: Vec<&StudyRow> = rows.iter().filter(|r| r.note.is_empty()).collect();
    ordered.sort_by(|a, b| {
        a.key
            .parse::<f64>()
            .unwrap_or(0.0)
            .total_cmp(&b.key.parse::<f64>().unwrap_or(0.0))
    });
    let n = ordered.len().max(2);

    let mut c = Canvas::new(title);
    for (i, r) in ordered.iter().enumerate() {
        c.x_tick(i as f64 / (n - 1) as f64, &r.key);
    }
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        c.y_tick(t, &format!("{:.2}", t));
    }
    let asr_pts: Vec<(f64, f64)> = ordered
        .iter()
        .enumerate()
        .map(|(i, r)| (i as f64 / (n - 1) as f64, r.asr))
        .collect();
    let acc_pts: Vec<(f64, f64)> = ordered
        .iter()
        .enumerate()
        .map(|(i, r)| (i as f64 / (n - 1) as f64, r.acc))
        .collect();
    c.polyline(&asr_pts, "#d62728");
    c.polyline(&acc_pts, "#2ca02c");
    for (tx, ty) in &asr_pts {
        c.circle(*tx, *ty, "#d62728");
    }
    for (tx, ty) in &acc_pts {
        c.circle(*tx, *ty, "#2ca02c");
    }
    c.text(W - MR - 4.0, MT + 16.0, 12.0, "end", "red: ASR, green: ACC");
    c.finish("poison ratio", "metric")
}

/// Emit the plot set for a table: scatter pair or a poison line, plus the
/// underlying data file with every row preserved.
pub fn emit_plots(table: &StudyTable, out_dir: &std::path::Path, stem: &str) -> anyhow::Result<Vec<std::path::PathBuf>> {
    if table.rows.is_empty() {
        anyhow::bail!("cannot plot an empty table");
    }
    let mut written = Vec::new();
    let mut data = String::from("key,kappa,asr,acc\n");
    for r in &table.rows {
        data.push_str(&format!(
            "{},{},{},{}\n",
            r.key,
            archvuln::ntkscore::format_float(r.kappa),
            archvuln::ntkscore::format_float(r.asr),
            archvuln::ntkscore::format_float(r.acc)
        ));
    }
    let data_path = out_dir.join(format!("{stem}_data.csv"));
    std::fs::write(&data_path, data)?;
    written.push(data_path);

    match table.kind {
        StudyKind::ArchScatter => {
            let asr = scatter_svg(&table.rows, |r| r.asr, "score vs attack success", "ASR");
            let p = out_dir.join(format!("{stem}_score_asr.svg"));
            std::fs::write(&p, asr)?;
            written.push(p);
            let acc = scatter_svg(&table.rows, |r| r.acc, "score vs clean accuracy", "ACC");
            let p = out_dir.join(format!("{stem}_score_acc.svg"));
            std::fs::write(&p, acc)?;
            written.push(p);
        }
        StudyKind::PoisonLine => {
            let line = poison_line_svg(&table.rows, "metrics vs poisoning ratio");
            let p = out_dir.join(format!("{stem}_poison.svg"));
            std::fs::write(&p, line)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use archvuln::evalkit::StudySummary;

    fn row(key: &str, kappa: f64, acc: f64, asr: f64) -> StudyRow {
        StudyRow { key: key.into(), kappa, acc, asr, seed: 1, note: String::new() }
    }

    #[test]
    fn scatter_emits_rug_for_infinite_rows() {
        let rows = vec![
            row("a", 10.0, 0.9, 0.8),
            row("b", 100.0, 0.95, 0.5),
            row("c", f64::INFINITY, 0.25, 0.0),
        ];
        let svg = scatter_svg(&rows, |r| r.asr, "t", "ASR");
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(svg.contains("inf x1"));
    }

    #[test]
    fn plot_set_for_scatter_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let mut table = StudyTable {
            kind: StudyKind::ArchScatter,
            header: vec![],
            rows: (0..16)
                .map(|i| row(&format!("a{i}"), 10.0 + i as f64, 0.9, 0.5))
                .collect(),
            summary: StudySummary::default(),
        };
        let files = emit_plots(&table, dir.path(), "study").unwrap();
        assert_eq!(files.len(), 3); // data + two scatters
        let data = std::fs::read_to_string(&files[0]).unwrap();
        assert_eq!(data.lines().count(), 17);

        table.kind = StudyKind::PoisonLine;
        table.rows = vec![
            row("0", f64::NAN, 0.95, 0.3),
            row("0.001", f64::NAN, 0.95, 0.5),
            row("0.01", f64::NAN, 0.94, 0.8),
            row("0.1", f64::NAN, 0.94, 0.9),
        ];
        let files = emit_plots(&table, dir.path(), "poison").unwrap();
        assert_eq!(files.len(), 2); // data + line plot
        let svg = std::fs::read_to_string(&files[1]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        // four x ticks, one per ratio
        assert!(svg.contains(">0.001<"));
        assert!(svg.contains(">0.1<"));
    }

    #[test]
    fn empty_table_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let table = StudyTable {
            kind: StudyKind::ArchScatter,
            header: vec![],
            rows: vec![],
            summary: StudySummary::default(),
        };
        assert!(emit_plots(&table, dir.path(), "x").is_err());
    }
}
