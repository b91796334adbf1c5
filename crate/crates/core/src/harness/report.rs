use crate::error::{Error, Result};
use crate::harness::trial::MetricsRow;

pub const CSV_HEADER: &str = "seed,epoch,p_fraction,lr,train_loss_trimmed,train_loss_full,test_error";

/// `printf("%.9g")` formatting.
pub fn format_g9(x: f64) -> String {
    const DIGITS: i32 = 9;
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    let sci = format!("{:.*e}", (DIGITS - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent marker");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..DIGITS).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    } else {
        let fixed = format!("{:.*}", (DIGITS - 1 - exp) as usize, x);
        trim_zeros(&fixed).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// CSV text for a set of rows, ordered by (seed, epoch), LF line endings.
pub fn emit_csv(rows: &[MetricsRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Contract("no metrics rows to write".into()));
    }
    let mut sorted: Vec<&MetricsRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.seed, r.epoch));
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in sorted {
        let fields = [
            r.seed.to_string(),
            r.epoch.to_string(),
            format_g9(r.p_fraction),
            format_g9(r.lr),
            format_g9(r.train_loss_trimmed),
            format_g9(r.train_loss_full),
            format_g9(r.test_error),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Winner {
    Off,
    On,
}

/// Final test error of both variants for one dataset/model pair, in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonCell {
    pub off_per_seed: Vec<(u64, f64)>,
    pub on_per_seed: Vec<(u64, f64)>,
    pub off_mean: f64,
    pub on_mean: f64,
}

impl ComparisonCell {
    /// `per_seed` values are fractions in `[0, 1]`.
    pub fn new(off: Vec<(u64, f64)>, on: Vec<(u64, f64)>) -> Result<Self> {
        if off.is_empty() || on.is_empty() {
            return Err(Error::Contract(
                "comparison needs at least one seed per variant".into(),
            ));
        }
        let pct =
            |v: Vec<(u64, f64)>| -> Vec<(u64, f64)> { v.into_iter().map(|(s, e)| (s, 100.0 * e)).collect() };
        let mean = |v: &[(u64, f64)]| v.iter().map(|p| p.1).sum::<f64>() / v.len() as f64;
        let (off, on) = (pct(off), pct(on));
        Ok(ComparisonCell {
            off_mean: mean(&off),
            on_mean: mean(&on),
            off_per_seed: off,
            on_per_seed: on,
        })
    }

    /// Lower displayed mean wins. Equal displayed means are a tie.
    pub fn winner(&self) -> Option<Winner> {
        let (a, b) = (format!("{:.2}", self.off_mean), format!("{:.2}", self.on_mean));
        if a == b {
            None
        } else if self.off_mean < self.on_mean {
            Some(Winner::Off)
        } else {
            Some(Winner::On)
        }
    }

    /// `"<off> / <on>"` with two decimals; the winner is wrapped in `**`.
    pub fn render(&self) -> String {
        let off = format!("{:.2}", self.off_mean);
        let on = format!("{:.2}", self.on_mean);
        match self.winner() {
            Some(Winner::Off) => format!("**{off}** / {on}"),
            Some(Winner::On) => format!("{off} / **{on}**"),
            None => format!("{off} / {on}"),
        }
    }

    /// One table line, e.g. `blobs/mlp3\t10.90 / **10.71**`.
    pub fn table_line(&self, label: &str) -> String {
        format!("{label}\t{}\n", self.render())
    }

    /// `seed,off_pct,on_pct` lines with a header.
    pub fn per_seed_csv(&self) -> String {
        let mut out = String::from("seed,off_pct,on_pct\n");
        for ((seed, off), (_, on)) in self.off_per_seed.iter().zip(&self.on_per_seed) {
            out.push_str(&format!("{seed},{},{}\n", format_g9(*off), format_g9(*on)));
        }
        out
    }
}
