//! Finite-difference verification of reverse-mode gradients.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tape::Gradients;
use crate::tensor::Tensor;

/// Relative error with a floor so near-zero gradients compare sanely.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Compares analytic gradients against central differences of `eval`.
///
/// `eval` must recompute the scalar loss from scratch for any setting of the
/// parameters. Every element of every parameter is perturbed by ±h, so keep
/// the parameter set small. Returns the worst relative error observed.
pub fn fd_check(
    params: &IndexMap<String, Tensor>,
    grads: &Gradients,
    h: f64,
    eval: impl Fn(&IndexMap<String, Tensor>) -> Result<f64>,
) -> Result<f64> {
    let mut work = params.clone();
    let mut worst = 0.0f64;
    for (name, t) in params {
        let zero = vec![0.0; t.numel()];
        let analytic = grads.get(name).unwrap_or(&zero);
        if analytic.len() != t.numel() {
            return Err(Error::ShapeMismatch(format!(
                "gradient for {name} has {} elements, parameter has {}",
                analytic.len(),
                t.numel()
            )));
        }
        for e in 0..t.numel() {
            let orig = work[name].data[e];
            work[name].data[e] = orig + h;
            let fp = eval(&work)?;
            work[name].data[e] = orig - h;
            let fm = eval(&work)?;
            work[name].data[e] = orig;
            let fd = (fp - fm) / (2.0 * h);
            if !fd.is_finite() {
                return Err(Error::NonFinite(format!("finite difference for {name}[{e}]")));
            }
            worst = worst.max(rel_error(analytic[e], fd));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn param_map(entries: &[(&str, Tensor)]) -> IndexMap<String, Tensor> {
        entries.iter().map(|(n, t)| (n.to_string(), t.clone().param())).collect()
    }

    #[test]
    fn identity_gradient_is_exact() {
        // f(x) = x with x and h chosen so the central difference is exact in
        // binary floating point; the reported error must be exactly zero.
        let params = param_map(&[("x", Tensor::new(vec![1], vec![0.5]))]);
        let eval = |p: &IndexMap<String, Tensor>| Ok(p["x"].data[0]);
        let mut tape = Tape::new();
        let x = tape.param("x", &params["x"]);
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        let h = (2.0f64).powi(-20);
        let err = fd_check(&params, &grads, h, eval).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn quadratic_form_matches_closely() {
        // f(x) = x' A x for fixed A; analytic gradient is (A + A')x.
        let a = Tensor::new(vec![3, 3], vec![2.0, 0.5, -1.0, 0.3, 1.5, 0.2, -0.7, 0.1, 1.0]);
        let params = param_map(&[("x", Tensor::new(vec![3], vec![0.4, -0.9, 1.3]))]);
        let eval = |p: &IndexMap<String, Tensor>| {
            let mut tape = Tape::new();
            let x = tape.param("x", &p["x"]);
            let av = tape.constant(&a);
            let ax = tape.matvec(av, x);
            let q = tape.mul(x, ax);
            let loss = tape.sum_all(q);
            Ok(tape.value(loss).data[0])
        };
        let mut tape = Tape::new();
        let x = tape.param("x", &params["x"]);
        let av = tape.constant(&a);
        let ax = tape.matvec(av, x);
        let q = tape.mul(x, ax);
        let loss = tape.sum_all(q);
        let grads = tape.backward(loss).unwrap();
        let err = fd_check(&params, &grads, 1e-6, eval).unwrap();
        assert!(err < 1e-8, "rel error {err}");
    }

    #[test]
    fn every_core_op_passes_fd() {
        // One composite graph touching most op kinds; checked end to end.
        let params = param_map(&[
            ("w", Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4])),
            ("b", Tensor::new(vec![3], vec![0.05, -0.1, 0.2])),
            ("g", Tensor::new(vec![3], vec![1.1, 0.9, 1.0])),
            ("z", Tensor::new(vec![3], vec![0.0, 0.1, -0.1])),
            ("s", Tensor::new(vec![1], vec![0.8])),
        ]);
        let build = |p: &IndexMap<String, Tensor>| -> Result<f64> {
            let mut tape = Tape::new();
            let w = tape.param("w", &p["w"]);
            let b = tape.param("b", &p["b"]);
            let g = tape.param("g", &p["g"]);
            let z = tape.param("z", &p["z"]);
            let s = tape.param("s", &p["s"]);
            let x = tape.constant_vec(vec![2, 3], vec![0.2, -0.6, 1.0, 0.4, 0.3, -0.8]);
            let wx = tape.mul(w, x);
            let wb = tape.add_rows(wx, b);
            let ln = tape.layer_norm(wb, g, z);
            let act = tape.gelu(ln);
            let pooled = tape.mean_rows(act);
            let scaled = tape.mul_scalar_var(pooled, s);
            let sm = tape.softmax_rows(scaled);
            let th = tape.tanh(sm);
            let sg = tape.sigmoid(th);
            let sp = tape.softplus(sg);
            let first = tape.slice_vec(sp, 0, 2);
            let second = tape.slice_vec(sp, 1, 2);
            let cat = tape.concat_vec(first, second);
            let picked = tape.pick(cat, 2);
            let rest = tape.sum_all(cat);
            let combined = tape.add(picked, rest);
            let loss = tape.scale(combined, 0.7);
            let v = tape.value(loss).data[0];
            let _ = tape.backward(loss)?;
            Ok(v)
        };
        let eval = |p: &IndexMap<String, Tensor>| build(p);
        // analytic pass
        let mut tape = Tape::new();
        let w = tape.param("w", &params["w"]);
        let b = tape.param("b", &params["b"]);
        let g = tape.param("g", &params["g"]);
        let z = tape.param("z", &params["z"]);
        let s = tape.param("s", &params["s"]);
        let x = tape.constant_vec(vec![2, 3], vec![0.2, -0.6, 1.0, 0.4, 0.3, -0.8]);
        let wx = tape.mul(w, x);
        let wb = tape.add_rows(wx, b);
        let ln = tape.layer_norm(wb, g, z);
        let act = tape.gelu(ln);
        let pooled = tape.mean_rows(act);
        let scaled = tape.mul_scalar_var(pooled, s);
        let sm = tape.softmax_rows(scaled);
        let th = tape.tanh(sm);
        let sg = tape.sigmoid(th);
        let sp = tape.softplus(sg);
        let first = tape.slice_vec(sp, 0, 2);
        let second = tape.slice_vec(sp, 1, 2);
        let cat = tape.concat_vec(first, second);
        let picked = tape.pick(cat, 2);
        let rest = tape.sum_all(cat);
        let combined = tape.add(picked, rest);
        let loss = tape.scale(combined, 0.7);
        let grads = tape.backward(loss).unwrap();
        let err = fd_check(&params, &grads, 1e-6, eval).unwrap();
        assert!(err < 1e-6, "rel error {err}");
    }

    #[test]
    fn attention_and_losses_pass_fd() {
        let params = param_map(&[
            ("q", Tensor::new(vec![3, 4], (0..12).map(|i| 0.1 * i as f64 - 0.5).collect())),
            ("k", Tensor::new(vec![3, 4], (0..12).map(|i| 0.07 * i as f64 - 0.3).collect())),
            ("v", Tensor::new(vec![3, 4], (0..12).map(|i| -0.05 * i as f64 + 0.4).collect())),
        ]);
        let build = |p: &IndexMap<String, Tensor>| -> Result<f64> {
            let mut tape = Tape::new();
            let q = tape.param("q", &p["q"]);
            let k = tape.param("k", &p["k"]);
            let v = tape.param("v", &p["v"]);
            let causal = tape.causal_self_attention(q, k, v, 2, true);
            let full = tape.full_self_attention(q, k, v, 2);
            let both = tape.add(causal, full);
            let l1 = tape.ce_seq(both, &[Some(1), None, Some(3)]);
            let row = tape.row(both, 2);
            let l2 = tape.ce_row(row, 0);
            let picked = tape.pick(row, 1);
            let l3 = tape.bce_many(&[picked], &[1.0]);
            let a = tape.add(l1, l2);
            let loss = tape.add(a, l3);
            let out = tape.value(loss).data[0];
            let _ = tape.backward(loss)?;
            Ok(out)
        };
        let eval = |p: &IndexMap<String, Tensor>| build(p);
        let mut tape = Tape::new();
        let q = tape.param("q", &params["q"]);
        let k = tape.param("k", &params["k"]);
        let v = tape.param("v", &params["v"]);
        let causal = tape.causal_self_attention(q, k, v, 2, true);
        let full = tape.full_self_attention(q, k, v, 2);
        let both = tape.add(causal, full);
        let l1 = tape.ce_seq(both, &[Some(1), None, Some(3)]);
        let row = tape.row(both, 2);
        let l2 = tape.ce_row(row, 0);
        let picked = tape.pick(row, 1);
        let l3 = tape.bce_many(&[picked], &[1.0]);
        let a = tape.add(l1, l2);
        let loss = tape.add(a, l3);
        let grads = tape.backward(loss).unwrap();
        let err = fd_check(&params, &grads, 1e-6, eval).unwrap();
        assert!(err < 1e-6, "rel error {err}");
    }

    #[test]
    fn gather_ops_pass_fd() {
        let params = param_map(&[
            ("table", Tensor::new(vec![4, 3], (0..12).map(|i| 0.2 * i as f64 - 1.0).collect())),
            ("slot", Tensor::new(vec![3], vec![0.3, -0.2, 0.9])),
            ("pos", Tensor::new(vec![5, 3], (0..15).map(|i| 0.05 * i as f64).collect())),
        ]);
        let build = |p: &IndexMap<String, Tensor>| -> Result<f64> {
            let mut tape = Tape::new();
            let table = tape.param("table", &p["table"]);
            let slot = tape.param("slot", &p["slot"]);
            let pos = tape.param("pos", &p["pos"]);
            let x = tape.gather_inject(table, &[2, 0, 3, 2], &[(1, slot)]);
            let xp = tape.add_pos_table(x, pos);
            let plain = tape.gather(table, &[1, 1]);
            let pooled_a = tape.mean_rows(xp);
            let pooled_b = tape.mean_rows(plain);
            let merged = tape.mul(pooled_a, pooled_b);
            let loss = tape.sum_all(merged);
            let out = tape.value(loss).data[0];
            let _ = tape.backward(loss)?;
            Ok(out)
        };
        let eval = |p: &IndexMap<String, Tensor>| build(p);
        let mut tape = Tape::new();
        let table = tape.param("table", &params["table"]);
        let slot = tape.param("slot", &params["slot"]);
        let pos = tape.param("pos", &params["pos"]);
        let x = tape.gather_inject(table, &[2, 0, 3, 2], &[(1, slot)]);
        let xp = tape.add_pos_table(x, pos);
        let plain = tape.gather(table, &[1, 1]);
        let pooled_a = tape.mean_rows(xp);
        let pooled_b = tape.mean_rows(plain);
        let merged = tape.mul(pooled_a, pooled_b);
        let loss = tape.sum_all(merged);
        let grads = tape.backward(loss).unwrap();
        let err = fd_check(&params, &grads, 1e-6, eval).unwrap();
        assert!(err < 1e-6, "rel error {err}");
    }

    #[test]
    fn matmul_family_passes_fd() {
        let params = param_map(&[
            ("a", Tensor::new(vec![2, 3], vec![0.3, -0.4, 0.5, 0.9, 0.2, -0.6])),
            ("b", Tensor::new(vec![3, 2], vec![0.7, -0.1, 0.4, 0.8, -0.3, 0.2])),
            ("c", Tensor::new(vec![2, 3], vec![-0.2, 0.6, 0.1, 0.5, -0.9, 0.3])),
            ("vv", Tensor::new(vec![2], vec![0.4, -0.7])),
        ]);
        let build = |p: &IndexMap<String, Tensor>| -> Result<f64> {
            let mut tape = Tape::new();
            let a = tape.param("a", &p["a"]);
            let b = tape.param("b", &p["b"]);
            let c = tape.param("c", &p["c"]);
            let vv = tape.param("vv", &p["vv"]);
            let ab = tape.matmul(a, b); // 2x2
            let atc = tape.matmul_tb(a, c); // 2x2
            let sum = tape.add(ab, atc);
            let mv = tape.matvec(sum, vv); // 2
            let vm = tape.vecmat(vv, sum); // 2
            let sub = tape.sub(mv, vm);
            let loss = tape.sum_all(sub);
            let out = tape.value(loss).data[0];
            let _ = tape.backward(loss)?;
            Ok(out)
        };
        let eval = |p: &IndexMap<String, Tensor>| build(p);
        let mut tape = Tape::new();
        let a = tape.param("a", &params["a"]);
        let b = tape.param("b", &params["b"]);
        let c = tape.param("c", &params["c"]);
        let vv = tape.param("vv", &params["vv"]);
        let ab = tape.matmul(a, b);
        let atc = tape.matmul_tb(a, c);
        let sum = tape.add(ab, atc);
        let mv = tape.matvec(sum, vv);
        let vm = tape.vecmat(vv, sum);
        let sub = tape.sub(mv, vm);
        let loss = tape.sum_all(sub);
        let grads = tape.backward(loss).unwrap();
        let err = fd_check(&params, &grads, 1e-6, eval).unwrap();
        assert!(err < 1e-6, "rel error {err}");
    }
}
