//! Byte-stable output formatting. Every float is serialized with
//! `{:.16e}` (17 significant digits), field order is fixed by the writers,
//! and nothing time- or machine-dependent is emitted, so identical inputs
//! produce identical files.

use nalgebra::{DMatrix, DVector};
use risklqr::{AffinePolicy, KktReport, NoiseStats};
use serde::Deserialize;

pub fn fnum(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn jvec(v: &DVector<f64>) -> String {
    let entries: Vec<String> = v.iter().map(|x| fnum(*x)).collect();
    format!("[{}]", entries.join(", "))
}

pub fn jmat(m: &DMatrix<f64>) -> String {
    let rows: Vec<String> = (0..m.nrows())
        .map(|i| {
            let entries: Vec<String> = (0..m.ncols()).map(|j| fnum(m[(i, j)])).collect();
            format!("[{}]", entries.join(", "))
        })
        .collect();
    format!("[{}]", rows.join(", "))
}

fn jseq<T, F: Fn(&T) -> String>(items: &[T], render: F, indent: &str) -> String {
    let inner: Vec<String> = items
        .iter()
        .map(|item| format!("{indent}  {}", render(item)))
        .collect();
    format!("[\n{}\n{indent}]", inner.join(",\n"))
}

pub fn kkt_json(kkt: &KktReport, indent: &str) -> String {
    format!(
        "{{\n{indent}  \"stationarity_gap\": {},\n{indent}  \"primal_feasibility\": {},\n\
         {indent}  \"complementary_slackness\": {},\n{indent}  \"passed\": {}\n{indent}}}",
        fnum(kkt.stationarity_gap),
        fnum(kkt.primal_feasibility),
        fnum(kkt.complementary_slackness),
        kkt.passed
    )
}

pub fn stats_json(stats: &NoiseStats) -> String {
    format!(
        "{{\n  \"mean\": {},\n  \"cov\": {},\n  \"m3\": {},\n  \"m4\": {},\n  \"qc\": {}\n}}\n",
        jvec(&stats.mean),
        jmat(&stats.cov),
        jvec(&stats.m3),
        fnum(stats.m4),
        jmat(&stats.qc_used),
    )
}

/// Policy file. Finite-horizon policies carry per-stage arrays
/// (K: [horizon][p][n], l/h: [horizon][p], V/S/T: [horizon+1][n][n],
/// c: [horizon+1]); stationary policies (steady = true) carry one stage
/// (K: [p][n], l/h: [p], V/S/T: [n][n], c: scalar) that applies at every t.
pub fn policy_json(policy: &AffinePolicy) -> String {
    let n = policy.state_dim();
    let p = policy.input_dim();
    let horizon = policy.horizon();
    let head = format!(
        "{{\n  \"mu\": {},\n  \"steady\": {},\n  \"n\": {n},\n  \"p\": {p},\n  \"horizon\": {horizon},\n",
        fnum(policy.mu),
        policy.steady
    );
    if policy.steady {
        format!(
            "{head}  \"K\": {},\n  \"l\": {},\n  \"h\": {},\n  \"V\": {},\n  \"S\": {},\n  \"T\": {},\n  \"c\": {}\n}}\n",
            jmat(&policy.gains[0]),
            jvec(&policy.offsets_l[0]),
            jvec(&policy.offsets_h[0]),
            jmat(&policy.values_v[0]),
            jmat(&policy.values_s[0]),
            jmat(&policy.values_t[0]),
            fnum(policy.constants_c[0]),
        )
    } else {
        format!(
            "{head}  \"K\": {},\n  \"l\": {},\n  \"h\": {},\n  \"V\": {},\n  \"S\": {},\n  \"T\": {},\n  \"c\": {}\n}}\n",
            jseq(&policy.gains, jmat, "  "),
            jseq(&policy.offsets_l, jvec, "  "),
            jseq(&policy.offsets_h, jvec, "  "),
            jseq(&policy.values_v, jmat, "  "),
            jseq(&policy.values_s, jmat, "  "),
            jseq(&policy.values_t, jmat, "  "),
            jseq(&policy.constants_c, |c| fnum(*c), "  "),
        )
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FinitePolicyFile {
    mu: f64,
    steady: bool,
    n: usize,
    p: usize,
    horizon: usize,
    #[serde(rename = "K")]
    k: Vec<Vec<Vec<f64>>>,
    l: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    #[serde(rename = "V")]
    v: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "S")]
    s: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "T")]
    t: Vec<Vec<Vec<f64>>>,
    c: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SteadyPolicyFile {
    mu: f64,
    steady: bool,
    n: usize,
    p: usize,
    horizon: usize,
    #[serde(rename = "K")]
    k: Vec<Vec<f64>>,
    l: Vec<f64>,
    h: Vec<f64>,
    #[serde(rename = "V")]
    v: Vec<Vec<f64>>,
    #[serde(rename = "S")]
    s: Vec<Vec<f64>>,
    #[serde(rename = "T")]
    t: Vec<Vec<f64>>,
    c: f64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PolicyFile {
    Finite(FinitePolicyFile),
    Steady(SteadyPolicyFile),
}

fn sized_matrix(
    rows: &[Vec<f64>],
    nrows: usize,
    ncols: usize,
    what: &str,
) -> Result<DMatrix<f64>, String> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(format!("policy file: {what} must be {nrows}x{ncols}"));
    }
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(nrows, ncols, &data))
}

fn sized_vector(entries: &[f64], len: usize, what: &str) -> Result<DVector<f64>, String> {
    if entries.len() != len {
        return Err(format!("policy file: {what} must have length {len}"));
    }
    Ok(DVector::from_row_slice(entries))
}

fn staged<T, U>(
    stages: &[T],
    count: usize,
    what: &str,
    build: impl Fn(&T) -> Result<U, String>,
) -> Result<Vec<U>, String> {
    if stages.len() != count {
        return Err(format!("policy file: {what} must have {count} stages"));
    }
    stages.iter().map(build).collect()
}

pub fn parse_policy(text: &str) -> Result<AffinePolicy, String> {
    let file: PolicyFile =
        serde_json::from_str(text).map_err(|e| format!("policy file: {e}"))?;
    match file {
        PolicyFile::Finite(f) => {
            if f.steady {
                return Err("policy file: steady flag set on per-stage arrays".into());
            }
            if f.horizon == 0 {
                return Err("policy file: horizon must be >= 1".into());
            }
            Ok(AffinePolicy {
                gains: staged(&f.k, f.horizon, "K", |m| sized_matrix(m, f.p, f.n, "K"))?,
                offsets_l: staged(&f.l, f.horizon, "l", |v| sized_vector(v, f.p, "l"))?,
                offsets_h: staged(&f.h, f.horizon, "h", |v| sized_vector(v, f.p, "h"))?,
                values_v: staged(&f.v, f.horizon + 1, "V", |m| sized_matrix(m, f.n, f.n, "V"))?,
                values_s: staged(&f.s, f.horizon + 1, "S", |m| sized_matrix(m, f.n, f.n, "S"))?,
                values_t: staged(&f.t, f.horizon + 1, "T", |m| sized_matrix(m, f.n, f.n, "T"))?,
                constants_c: staged(&f.c, f.horizon + 1, "c", |c| Ok(*c))?,
                mu: f.mu,
                steady: false,
            })
        }
        PolicyFile::Steady(f) => {
            if !f.steady {
                return Err("policy file: single-stage arrays require steady = true".into());
            }
            if f.horizon == 0 {
                return Err("policy file: horizon must be >= 1".into());
            }
            let k = sized_matrix(&f.k, f.p, f.n, "K")?;
            let l = sized_vector(&f.l, f.p, "l")?;
            let h = sized_vector(&f.h, f.p, "h")?;
            let v = sized_matrix(&f.v, f.n, f.n, "V")?;
            let s = sized_matrix(&f.s, f.n, f.n, "S")?;
            let t = sized_matrix(&f.t, f.n, f.n, "T")?;
            Ok(AffinePolicy {
                gains: vec![k; f.horizon],
                offsets_l: vec![l; f.horizon],
                offsets_h: vec![h; f.horizon],
                values_v: vec![v; f.horizon + 1],
                values_s: vec![s; f.horizon + 1],
                values_t: vec![t; f.horizon + 1],
                constants_c: vec![f.c; f.horizon + 1],
                mu: f.mu,
                steady: true,
            })
        }
    }
}

/// CSV assembly: `header` without newline, rows as pre-rendered cells.
pub fn csv(header: &str, rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
