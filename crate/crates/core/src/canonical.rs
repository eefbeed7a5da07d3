//! Canonical text serialization used for digests and authenticity tags.
//!
//! Field order is fixed, numbers are rendered with exactly nine fractional
//! digits and the output never contains a newline, so independent
//! implementations produce the same bytes.

use std::fmt::Write;

use crate::formats::{argmax, Format, PredictionVector};
use crate::incentive::ScoreReport;

pub fn number(x: f64) -> String {
    let mut out = String::with_capacity(16);
    push_number(&mut out, x);
    out
}

fn push_number(out: &mut String, x: f64) {
    let y = x * 1e9;
    if y.abs() < 4.0e15 {
        // `y` is within half an ulp of the exact product; unless that
        // leaves the rounding direction in doubt, integer rounding agrees
        // with exact decimal rounding.
        let frac = y - y.floor();
        if (frac - 0.5).abs() > 1e-5 {
            let r = y.round() as i64;
            let mut a = r.unsigned_abs();
            let mut buf = [0u8; 24];
            let mut i = buf.len();
            for k in 0.. {
                if k == 9 {
                    i -= 1;
                    buf[i] = b'.';
                }
                i -= 1;
                buf[i] = b'0' + (a % 10) as u8;
                a /= 10;
                if a == 0 && k >= 9 {
                    break;
                }
            }
            if r < 0 {
                out.push('-');
            }
            out.push_str(std::str::from_utf8(&buf[i..]).expect("ascii digits"));
            return;
        }
    }
    let start = out.len();
    let _ = write!(out, "{x:.9}");
    if out[start..].starts_with('-') && out[start + 1..].bytes().all(|b| b == b'0' || b == b'.') {
        out.remove(start);
    }
}

/// Rounds a prediction to the nine-digit grid of the canonical form, keeping
/// measurement vectors summing to one. Rank and abstract vectors are
/// integral already.
pub fn quantize(p: &PredictionVector) -> PredictionVector {
    if p.format() != Format::Measurement {
        return p.clone();
    }
    let grid = |x: f64| (x * 1e9).round();
    let mut units: Vec<f64> = p.values().iter().map(|&x| grid(x)).collect();
    let top = argmax(p.values());
    units[top] += 1e9 - units.iter().sum::<f64>();
    let values = units.into_iter().map(|u| u / 1e9).collect();
    PredictionVector::new(Format::Measurement, values).expect("quantized distribution stays valid")
}

fn push_numbers(out: &mut String, values: &[f64]) {
    out.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_number(out, *v);
    }
    out.push(']');
}

pub fn prediction(p: &PredictionVector) -> String {
    let mut out = String::new();
    push_prediction(&mut out, p);
    out
}

fn push_prediction(out: &mut String, p: &PredictionVector) {
    let _ = write!(out, "{{\"format\":\"{}\",\"values\":", p.format());
    push_numbers(out, p.values());
    out.push('}');
}

pub fn predictions(ps: &[PredictionVector]) -> String {
    let mut out = String::from("[");
    for (i, p) in ps.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_prediction(&mut out, p);
    }
    out.push(']');
    out
}

/// The bytes a provider authenticates when submitting.
pub fn submission(task_id: &str, provider_id: &str, nonce: &str, ps: &[PredictionVector]) -> String {
    format!(
        "{{\"task_id\":\"{task_id}\",\"provider_id\":\"{provider_id}\",\"nonce\":\"{nonce}\",\"predictions\":{}}}",
        predictions(ps)
    )
}

/// Aggregated predictions, one `{query, values}` record per query.
pub fn aggregates<S: AsRef<str>>(task_id: &str, queries: &[S], truths: &[Vec<f64>]) -> String {
    let mut out = format!("{{\"task_id\":\"{task_id}\",\"aggregates\":[");
    for (i, (q, t)) in queries.iter().zip(truths).enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{{\"query\":\"{}\",\"values\":", q.as_ref());
        push_numbers(&mut out, t);
        out.push('}');
    }
    out.push_str("]}");
    out
}

pub fn score_report(r: &ScoreReport) -> String {
    format!(
        "{{\"provider\":\"{}\",\"query\":\"{}\",\"peer\":\"{}\",\"score_i\":{},\"score_p\":{},\"total\":{},\"payment\":{},\"deposit_refunded\":{}}}",
        r.provider,
        r.query.as_ref().map(|q| q.as_str()).unwrap_or("*"),
        r.peer.as_ref().map(|q| q.as_str()).unwrap_or(""),
        number(r.score_i),
        number(r.score_p),
        number(r.total),
        number(r.payment),
        r.deposit_refunded
    )
}

/// The bytes the aggregator authenticates when publishing a result.
pub fn result(task_id: &str, digest_hex: &str, reports: &[ScoreReport]) -> String {
    let mut out = format!("{{\"task_id\":\"{task_id}\",\"digest\":\"{digest_hex}\",\"scores\":[");
    for (i, r) in reports.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&score_report(r));
    }
    out.push_str("]}");
    out
}
