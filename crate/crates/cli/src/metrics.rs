//! Per-round metrics CSV.

use std::fmt::Write;

use noisyfed::RoundMetrics;

pub const HEADER: &str = "round,train_loss,grad_norm_sq,uplink_var,downlink_var,snr_up,snr_down,diverged";

/// Thirteen significant digits in scientific notation; infinities print as `inf`.
pub fn number(v: f64) -> String {
    format!("{v:.12e}")
}

fn optional(v: Option<f64>) -> String {
    v.map(number).unwrap_or_default()
}

/// Renders one metrics file. An SNR column is empty when its link is off.
pub fn render(metrics: &[RoundMetrics]) -> String {
    let mut out = String::with_capacity(64 * (metrics.len() + 1));
    out.push_str(HEADER);
    out.push('\n');
    for m in metrics {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            m.round,
            number(m.train_loss),
            number(m.grad_norm_sq),
            number(m.uplink_variance),
            number(m.downlink_variance),
            optional(m.mean_snr_up),
            optional(m.mean_snr_down),
            u8::from(m.diverged)
        )
        .expect("writing to a String");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_have_enough_digits() {
        let m = RoundMetrics {
            round: 3,
            train_loss: 1.0 / 3.0,
            grad_norm_sq: 2.0,
            uplink_variance: 0.04,
            downlink_variance: 0.0,
            mean_snr_up: Some(12.5),
            mean_snr_down: None,
            diverged: false,
        };
        let text = render(&[m]);
        let row = text.lines().nth(1).unwrap();
        assert_eq!(
            row,
            "3,3.333333333333e-1,2.000000000000e0,4.000000000000e-2,0.000000000000e0,1.250000000000e1,,0"
        );
        assert_eq!(number(f64::INFINITY), "inf");
        let parsed: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
        assert!((parsed - 1.0 / 3.0).abs() < 1e-12);
    }
}
