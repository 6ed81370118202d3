//! CSV and JSONL trace writers.
//!
//! Every file starts with the build identifier and the resolved config. CSV
//! metadata lines begin with `#`; the rest of the file (the body) is a pure
//! function of the config and seed.

use std::fmt::Write as _;
use std::io::Write;

use crate::error::Result;
use crate::sim_engine::RoundRecord;

use super::config::{ExperimentConfig, TraceFormat};

pub const BUILD_ID: &str = concat!("goodspeed ", env!("CARGO_PKG_VERSION"));

/// Formats `v` with 9 significant digits, dropping trailing zeros.
pub fn fmt_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..15).contains(&exp) {
        let s = format!("{:.*}", (8 - exp).max(0) as usize, v);
        trim_zeros(&s).to_string()
    } else {
        let s = format!("{v:.8e}");
        let (mantissa, exponent) = s.split_once('e').expect("exponent form");
        format!("{}e{exponent}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// `# `-prefixed metadata lines plus the column header.
pub fn csv_header(cfg: &ExperimentConfig, title: &str, columns: &[String]) -> String {
    format!(
        "# {title}\n# build: {BUILD_ID}\n# config: {}\n{}\n",
        cfg.resolved_json(),
        columns.join(",")
    )
}

pub fn trace_columns(clients: usize) -> Vec<String> {
    let mut cols: Vec<String> = ["t", "scheduler", "seed"].iter().map(|s| s.to_string()).collect();
    for prefix in ["x", "X", "xbar", "alpha_true", "alpha_hat", "S"] {
        cols.extend((0..clients).map(|i| format!("{prefix}_{i}")));
    }
    cols.extend(
        [
            "U_smoothed",
            "U_running_avg",
            "receive_ms",
            "verify_ms",
            "send_ms",
            "total_ms",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    cols
}

fn push_list<T, F: Fn(&T) -> String>(line: &mut String, values: &[T], f: F) {
    for v in values {
        line.push(',');
        line.push_str(&f(v));
    }
}

pub fn csv_row(r: &RoundRecord, scheduler: &str, seed: u64) -> String {
    let mut line = format!("{},{scheduler},{seed}", r.t);
    push_list(&mut line, &r.goodput, |v| v.to_string());
    push_list(&mut line, &r.goodput_hat, |v| fmt_sig9(*v));
    push_list(&mut line, &r.running_avg, |v| fmt_sig9(*v));
    push_list(&mut line, &r.alpha_true, |v| fmt_sig9(*v));
    push_list(&mut line, &r.alpha_hat, |v| fmt_sig9(*v));
    push_list(&mut line, &r.slots, |v| v.to_string());
    let tail = [
        r.utility_smoothed,
        r.utility_running_avg,
        r.time.receive_ms,
        r.time.verify_ms,
        r.time.send_ms,
        r.time.total_ms,
    ];
    push_list(&mut line, &tail, |v| fmt_sig9(*v));
    line
}

fn json_array<T, F: Fn(&T) -> String>(values: &[T], f: F) -> String {
    let items: Vec<String> = values.iter().map(f).collect();
    format!("[{}]", items.join(","))
}

/// A JSON number, or `null` for non-finite values.
pub fn json_num(v: f64) -> String {
    if v.is_finite() {
        fmt_sig9(v)
    } else {
        "null".into()
    }
}

pub fn jsonl_header(cfg: &ExperimentConfig, title: &str) -> String {
    let title = serde_json::to_string(title).expect("string serializes");
    format!(
        "{{\"header\":{title},\"build\":\"{BUILD_ID}\",\"config\":{}}}\n",
        cfg.resolved_json()
    )
}

pub fn jsonl_row(r: &RoundRecord, scheduler: &str, seed: u64) -> String {
    let mut s = String::new();
    let num = |v: &f64| json_num(*v);
    let int = |v: &u32| v.to_string();
    write!(
        s,
        "{{\"t\":{},\"scheduler\":\"{scheduler}\",\"seed\":{seed},\"x\":{},\"X\":{},\"xbar\":{},\
         \"alpha_true\":{},\"alpha_hat\":{},\"S\":{},\"U_smoothed\":{},\"U_running_avg\":{},\
         \"receive_ms\":{},\"verify_ms\":{},\"send_ms\":{},\"total_ms\":{}}}",
        r.t,
        json_array(&r.goodput, int),
        json_array(&r.goodput_hat, num),
        json_array(&r.running_avg, num),
        json_array(&r.alpha_true, num),
        json_array(&r.alpha_hat, num),
        json_array(&r.slots, int),
        json_num(r.utility_smoothed),
        json_num(r.utility_running_avg),
        json_num(r.time.receive_ms),
        json_num(r.time.verify_ms),
        json_num(r.time.send_ms),
        json_num(r.time.total_ms),
    )
    .expect("writing to a String");
    s
}

/// Streams round records of one run in one format.
pub struct TraceWriter<W: Write> {
    out: W,
    format: TraceFormat,
    scheduler: &'static str,
    seed: u64,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W, format: TraceFormat, cfg: &ExperimentConfig, scheduler: &'static str) -> Result<Self> {
        let title = format!("trace {} scheduler={scheduler} seed={}", cfg.name, cfg.seed);
        let header = match format {
            TraceFormat::Csv => csv_header(cfg, &title, &trace_columns(cfg.clients)),
            TraceFormat::Jsonl => jsonl_header(cfg, &title),
        };
        out.write_all(header.as_bytes())?;
        Ok(Self {
            out,
            format,
            scheduler,
            seed: cfg.seed,
        })
    }

    pub fn write(&mut self, r: &RoundRecord) -> Result<()> {
        let line = match self.format {
            TraceFormat::Csv => csv_row(r, self.scheduler, self.seed),
            TraceFormat::Jsonl => jsonl_row(r, self.scheduler, self.seed),
        };
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Lines of a CSV file that are not `#` metadata.
pub fn csv_body(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .fold(String::new(), |mut acc, l| {
            acc.push_str(l);
            acc.push('\n');
            acc
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_examples() {
        assert_eq!(fmt_sig9(0.0), "0");
        assert_eq!(fmt_sig9(1.5), "1.5");
        assert_eq!(fmt_sig9(-2.0), "-2");
        assert_eq!(fmt_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_sig9(123456.7891234), "123456.789");
        assert_eq!(fmt_sig9(9.9999999999), "10");
        assert_eq!(fmt_sig9(1.234e-7), "1.234e-7");
        assert_eq!(fmt_sig9(6.02214076e23), "6.02214076e23");
    }

    #[test]
    fn sig9_round_trips_to_nine_digits() {
        for v in [
            std::f64::consts::PI,
            5.6506e-3,
            987654321.123,
            0.1 + 0.2,
            1e-5,
            0.000099999,
        ] {
            let back: f64 = fmt_sig9(v).parse().unwrap();
            assert!(((back - v) / v).abs() <= 5e-9, "{v} -> {}", fmt_sig9(v));
        }
    }

    #[test]
    fn body_drops_metadata() {
        assert_eq!(csv_body("# a\n# b\nt,x\n1,2\n"), "t,x\n1,2\n");
    }

    #[test]
    fn columns() {
        let c = trace_columns(2);
        assert_eq!(&c[..5], &["t", "scheduler", "seed", "x_0", "x_1"]);
        assert_eq!(c.last().unwrap(), "total_ms");
        assert_eq!(c.len(), 3 + 6 * 2 + 6);
    }
}
