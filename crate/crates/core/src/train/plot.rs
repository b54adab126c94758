use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::eval::AttentionRecord;
use super::trainer::MetricsRow;

pub const EMA_WEIGHT: f64 = 0.99;

/// `s_0 = x_0`, `s_t = w s_{t-1} + (1 - w) x_t`.
pub fn ema(xs: &[f64], weight: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len());
    let mut s = None;
    for &x in xs {
        let v = match s {
            None => x,
            Some(prev) => weight * prev + (1.0 - weight) * x,
        };
        out.push(v);
        s = Some(v);
    }
    out
}

/// Pointwise mean and standard error across equally long series,
/// truncated to the shortest one.
pub fn mean_band(series: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let len = series.iter().map(Vec::len).min().unwrap_or(0);
    let n = series.len() as f64;
    let mut mean = Vec::with_capacity(len);
    let mut se = Vec::with_capacity(len);
    for t in 0..len {
        let m = series.iter().map(|s| s[t]).sum::<f64>() / n;
        let var = if series.len() > 1 {
            series.iter().map(|s| (s[t] - m).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        mean.push(m);
        se.push((var / n).sqrt());
    }
    (mean, se)
}

/// One labeled curve with its band.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub label: String,
    pub steps: Vec<u64>,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub seeds: usize,
}

/// Groups metrics rows by ablation, smooths each seed's success curve and
/// averages across seeds.
pub fn success_curves(rows: &[MetricsRow], weight: f64) -> Vec<Curve> {
    let mut by: BTreeMap<String, BTreeMap<u64, Vec<&MetricsRow>>> = BTreeMap::new();
    for r in rows {
        by.entry(r.ablation.to_string()).or_default().entry(r.seed).or_default().push(r);
    }
    by.into_iter()
        .map(|(label, seeds)| {
            let mut steps = Vec::new();
            let series: Vec<Vec<f64>> = seeds
                .values()
                .map(|rs| {
                    let mut rs = rs.clone();
                    rs.sort_by_key(|r| r.step);
                    if steps.is_empty() || rs.len() < steps.len() {
                        steps = rs.iter().map(|r| r.step).collect();
                    }
                    ema(&rs.iter().map(|r| r.train_success_rate).collect::<Vec<_>>(), weight)
                })
                .collect();
            let (mean, stderr) = mean_band(&series);
            steps.truncate(mean.len());
            Curve {
                label,
                steps,
                mean,
                stderr,
                seeds: series.len(),
            }
        })
        .collect()
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Line chart of curves with shaded standard-error bands.
pub fn curves_svg(curves: &[Curve], title: &str, y_label: &str) -> String {
    let (w, h, left, right, top, bottom) = (720.0, 420.0, 60.0, 150.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x_max = curves.iter().flat_map(|c| c.steps.last().copied()).max().unwrap_or(1).max(1) as f64;
    let y_min = 0.0f64.min(curves.iter().flat_map(|c| c.mean.iter().zip(&c.stderr).map(|(m, s)| m - s)).fold(0.0, f64::min));
    let y_max = curves
        .iter()
        .flat_map(|c| c.mean.iter().zip(&c.stderr).map(|(m, s)| m + s))
        .fold(1.0, f64::max);
    let sx = |x: f64| left + pw * x / x_max;
    let sy = |y: f64| top + ph * (1.0 - (y - y_min) / (y_max - y_min));
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let y = y_min + (y_max - y_min) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.2}</text>"#, left - 6.0, sy(y) + 4.0, y);
        let x = x_max * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{:.0}</text>"#, sx(x), top + ph + 18.0, x);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">environment steps</text>"#, left + pw / 2.0, h - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let upper: Vec<String> = (0..c.mean.len())
            .map(|t| format!("{:.2},{:.2}", sx(c.steps[t] as f64), sy(c.mean[t] + c.stderr[t])))
            .collect();
        let lower: Vec<String> = (0..c.mean.len())
            .rev()
            .map(|t| format!("{:.2},{:.2}", sx(c.steps[t] as f64), sy(c.mean[t] - c.stderr[t])))
            .collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = (0..c.mean.len())
            .map(|t| format!("{:.2},{:.2}", sx(c.steps[t] as f64), sy(c.mean[t])))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, line.join(" "));
        let ly = top + 16.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}">{} (n={})</text>"#,
            left + pw + 10.0,
            left + pw + 30.0,
            left + pw + 36.0,
            ly + 4.0,
            escape(&c.label),
            c.seeds
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Heatmaps of head-averaged weights for the first group of every level
/// in one attention record.
pub fn attention_svg(rec: &AttentionRecord) -> String {
    let cell = 26.0;
    let mut s = String::new();
    let mut y = 40.0;
    let mut body = String::new();
    let mut width: f64 = 300.0;
    for level in &rec.levels {
        if level.groups == 0 {
            continue;
        }
        let m = level.head_mean(0);
        let _ = writeln!(body, r#"<text x="10" y="{}" font-size="13">{} level</text>"#, y, escape(&level.level));
        y += 10.0;
        let x0 = 110.0;
        for (j, kl) in level.key_labels.iter().enumerate() {
            let _ = writeln!(
                body,
                r#"<text x="{}" y="{}" font-size="9" text-anchor="middle">{}</text>"#,
                x0 + cell * (j as f64 + 0.5),
                y + 8.0,
                escape(kl)
            );
        }
        y += 12.0;
        for (i, row) in m.iter().enumerate() {
            let ql = level.query_labels.get(i).map(String::as_str).unwrap_or("");
            let _ = writeln!(body, r#"<text x="{}" y="{}" font-size="9" text-anchor="end">{}</text>"#, x0 - 4.0, y + cell * 0.6, escape(ql));
            for (j, &v) in row.iter().enumerate() {
                let shade = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
                let _ = writeln!(
                    body,
                    r##"<rect x="{}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="#ccc"><title>{v:.4}</title></rect>"##,
                    x0 + cell * j as f64
                );
            }
            y += cell;
        }
        width = width.max(x0 + cell * level.k_len as f64 + 20.0);
        y += 24.0;
    }
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{y}" font-family="sans-serif"><rect width="{width}" height="{y}" fill="white"/>"#
    );
    let _ = writeln!(s, r#"<text x="10" y="20" font-size="14">episode {} step {}</text>"#, rec.episode, rec.step);
    s.push_str(&body);
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::config::Ablation;
    use proptest::prelude::*;

    #[test]
    fn ema_of_constant_is_constant() {
        assert!(ema(&[0.7; 50], EMA_WEIGHT).iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(ema(&[], EMA_WEIGHT).is_empty());
    }

    proptest! {
        #[test]
        fn ema_matches_closed_form(xs in prop::collection::vec(-5.0f64..5.0, 1..60), w in 0.0f64..1.0) {
            // s_t = w^t x_0 + sum_{k=1..t} (1 - w) w^(t-k) x_k
            let got = ema(&xs, w);
            for t in 0..xs.len() {
                let mut expect = w.powi(t as i32) * xs[0];
                for k in 1..=t {
                    expect += (1.0 - w) * w.powi((t - k) as i32) * xs[k];
                }
                prop_assert!((got[t] - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_seed_band_is_zero() {
        let (m, se) = mean_band(&[vec![0.1, 0.5, 0.9]]);
        assert_eq!(m, vec![0.1, 0.5, 0.9]);
        assert!(se.iter().all(|&v| v == 0.0));
        let (m, se) = mean_band(&[vec![0.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(m, vec![0.5, 1.0]);
        assert!((se[0] - 0.5).abs() < 1e-12 && se[1] == 0.0);
    }

    fn row(ablation: Ablation, seed: u64, step: u64, s: f64) -> MetricsRow {
        MetricsRow {
            step,
            updates: 0,
            episodes: 0,
            seed,
            ablation,
            episodic_return: None,
            train_success_rate: s,
            critic_loss: None,
            actor_loss: None,
            alpha_loss: None,
            slt_loss: None,
            alpha: 1.0,
        }
    }

    #[test]
    fn curves_group_by_ablation_and_render() {
        let rows = vec![
            row(Ablation::Full, 0, 200, 0.0),
            row(Ablation::Full, 0, 400, 1.0),
            row(Ablation::Full, 1, 200, 1.0),
            row(Ablation::Full, 1, 400, 1.0),
            row(Ablation::NoRoutes, 0, 200, 0.5),
        ];
        let curves = success_curves(&rows, 0.0);
        assert_eq!(curves.len(), 2);
        let full = &curves[0];
        assert_eq!(full.label, "full");
        assert_eq!(full.steps, vec![200, 400]);
        assert_eq!(full.mean, vec![0.5, 1.0]);
        assert_eq!(curves[1].stderr, vec![0.0]);
        let svg = curves_svg(&curves, "left turn", "success rate");
        assert!(svg.starts_with("<svg") && svg.contains("polyline") && svg.contains("no_routes"));
    }
}
