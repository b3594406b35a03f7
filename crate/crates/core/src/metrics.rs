//! Run-trace rows and the estimation error against the true response.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{forward_raw, ParamVector, Workspace};
use crate::scenario::{fmt_g17, true_response, IvDataset, ResponseKind};

/// Mean squared error of `g(.; theta)` against `g0`, with the network
/// output mapped back to original outcome units.
pub fn evaluate_mse(theta: &ParamVector, ds: &IvDataset, response: ResponseKind) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyShard);
    }
    let spec = theta.spec();
    if spec.input_width() != 1 || spec.output_width() != 1 {
        return Err(Error::DimensionMismatch {
            what: "g-network shape",
            expected: 1,
            got: spec.input_width(),
        });
    }
    let mut ws = Workspace::new(spec);
    let mut acc = 0.0;
    for &x in &ds.x {
        let g_hat = ds.to_original(forward_raw(spec, theta.values(), &[x], &mut ws));
        let d = g_hat - true_response(response, x);
        acc += d * d;
    }
    Ok(acc / ds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: usize,
    pub seed: u64,
    pub round: usize,
    pub u_value: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_tau: f64,
    pub train_mse: f64,
    pub val_mse: f64,
    pub test_mse: f64,
}

pub const TRACE_HEADER: &str =
    "run_id,seed,round,u_value,grad_norm_theta,grad_norm_tau,train_mse,val_mse,test_mse";

pub fn trace_to_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::with_capacity(64 + records.len() * 180);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.run_id,
            r.seed,
            r.round,
            fmt_g17(r.u_value),
            fmt_g17(r.grad_norm_theta),
            fmt_g17(r.grad_norm_tau),
            fmt_g17(r.train_mse),
            fmt_g17(r.val_mse),
            fmt_g17(r.test_mse),
        );
    }
    out
}

pub fn trace_from_csv(text: &str) -> std::result::Result<Vec<MetricsRecord>, String> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == TRACE_HEADER => {}
        other => return Err(format!("expected header `{TRACE_HEADER}`, got {other:?}")),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 9 {
            return Err(format!("line {}: expected 9 fields, got {}", i + 2, f.len()));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| format!("line {}: {e}", i + 2));
        let int = |s: &str| s.parse::<u64>().map_err(|e| format!("line {}: {e}", i + 2));
        out.push(MetricsRecord {
            run_id: int(f[0])? as usize,
            seed: int(f[1])?,
            round: int(f[2])? as usize,
            u_value: num(f[3])?,
            grad_norm_theta: num(f[4])?,
            grad_norm_tau: num(f[5])?,
            train_mse: num(f[6])?,
            val_mse: num(f[7])?,
            test_mse: num(f[8])?,
        });
    }
    Ok(out)
}

/// Row with the smallest validation MSE; ties go to the earliest round.
pub fn best_validation(records: &[MetricsRecord]) -> Option<&MetricsRecord> {
    records.iter().fold(None, |best: Option<&MetricsRecord>, r| match best {
        Some(b) if !(r.val_mse < b.val_mse) => Some(b),
        _ if r.val_mse.is_nan() => best,
        _ => Some(r),
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::nn::{Activation, MlpSpec};
    use crate::scenario::mean_std;

    fn linear(w: f64, b: f64) -> ParamVector {
        let s = Arc::new(MlpSpec::new(vec![1, 1], Activation::Identity).unwrap());
        ParamVector::new(s, vec![w, b]).unwrap()
    }

    fn ds(x: Vec<f64>) -> IvDataset {
        let n = x.len();
        IvDataset::new(x, vec![0.0; n], vec![[0.0; 2]; n]).unwrap()
    }

    #[test]
    fn exact_estimate_has_zero_error() {
        let d = ds(vec![-2.0, 0.5, 3.0]);
        assert_eq!(evaluate_mse(&linear(1.0, 0.0), &d, ResponseKind::Linear).unwrap(), 0.0);
    }

    #[test]
    fn mse_uses_original_units() {
        let mut d = ds(vec![1.0, 2.0]);
        d.y_mean = 1.0;
        d.y_std = 2.0;
        // standardized g = (x - 1) / 2 maps back to x
        let g = linear(0.5, -0.5);
        assert!(evaluate_mse(&g, &d, ResponseKind::Linear).unwrap() < 1e-30);
    }

    #[test]
    fn best_constant_gives_variance() {
        let x = vec![-1.5, -0.2, 0.3, 2.0, 2.5];
        let d = ds(x.clone());
        let g0: Vec<f64> = x.iter().map(|v| v.abs()).collect();
        let (m, s) = mean_std(&g0);
        let mse = evaluate_mse(&linear(0.0, m), &d, ResponseKind::Absolute).unwrap();
        assert!((mse - s * s).abs() <= 1e-12);
    }

    #[test]
    fn trace_roundtrip_and_best() {
        let mk = |round, val| MetricsRecord {
            run_id: 0,
            seed: 3,
            round,
            u_value: -0.1,
            grad_norm_theta: 1e-3,
            grad_norm_tau: 0.5,
            train_mse: 0.2,
            val_mse: val,
            test_mse: 0.1 * round as f64,
        };
        let recs = vec![mk(0, 0.5), mk(1, 0.2), mk(2, 0.2), mk(3, 0.3)];
        let csv = trace_to_csv(&recs);
        assert_eq!(trace_from_csv(&csv).unwrap(), recs);
        assert_eq!(best_validation(&recs).unwrap().round, 1);
        assert!(best_validation(&[]).is_none());
    }
}
