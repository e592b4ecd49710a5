#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use xadapter::numerics::{Graph, Tensor, Var};
use xadapter::xadapter::{AdapterConfig, FeatureMatrix, FeatureOrigin, XAdapterLayer};
use xadapter::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn random_features(rng: &mut ChaCha8Rng, n: usize, dc: usize) -> FeatureMatrix {
    FeatureMatrix::new(random_tensor(rng, n, dc), FeatureOrigin::Retrieved).unwrap()
}

pub fn small_adapter() -> AdapterConfig {
    AdapterConfig {
        d_model: 6,
        hidden: 8,
        heads: 2,
        ffn_dim: 10,
        feature_dim: 5,
        s_init: 0.1,
    }
}

/// Every parameter drawn from U(-0.8, 0.8), so no path is trivially zero.
pub fn randomize(layer: &mut XAdapterLayer, rng: &mut ChaCha8Rng) {
    let paths: Vec<String> = layer.params().paths().map(str::to_string).collect();
    for path in paths {
        let t = layer.params_mut().get_mut(&path).unwrap();
        for v in t.data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
}

/// Below this norm a gradient counts as zero; finite differences of an
/// exactly flat function are pure rounding noise around 1e-11.
pub const ZERO_GRAD: f64 = 1e-8;

/// `‖a − n‖ / (‖a‖ + ‖n‖)`, or the plain `‖a − n‖` when both gradients are
/// zero (the key bias, for one: softmax ignores a shift shared by a row).
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let denom = norm(analytic) + norm(numeric);
    if denom < ZERO_GRAD {
        norm(&diff)
    } else {
        norm(&diff) / denom
    }
}

/// Central differences of `f` around `x`, one coordinate at a time.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `Σ out ⊙ r`, a scalar whose gradient is `r` at `out`.
pub fn project(g: &mut Graph, out: Var, r: &Tensor) -> Result<Var> {
    let r = g.constant(r.clone());
    let prod = g.mul(out, r)?;
    Ok(g.sum(prod))
}

/// Relative error of the autodiff gradient of `build` for each input.
pub fn check_inputs(
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Vec<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();

    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let loss = build(&mut g, &vars).unwrap();
        g.value(loss).item()
    };
    inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let analytic = grads
                .get(vars[i])
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec);
            let numeric = numeric_grad(t.data(), |x| {
                let mut ts = inputs.to_vec();
                ts[i] = Tensor::new(t.shape().to_vec(), x.to_vec()).unwrap();
                eval(&ts)
            });
            rel_err(&analytic, &numeric)
        })
        .collect()
}

/// Max relative gradient error of every graph op on one random instance,
/// keyed by op name.
pub fn op_errors(rng: &mut ChaCha8Rng) -> Vec<(&'static str, f64)> {
    let (n, k, m) = (3, 4, 5);
    let a = random_tensor(rng, n, k);
    let b = random_tensor(rng, k, m);
    let bt = random_tensor(rng, m, k);
    let c = random_tensor(rng, n, k);
    let r_nm = random_tensor(rng, n, m);
    let r_nk = random_tensor(rng, n, k);
    let bias = Tensor::vector((0..k).map(|_| rng.random_range(-1.0..1.0)).collect());
    let s = Tensor::scalar(rng.random_range(-2.0..2.0));
    let gamma = Tensor::vector((0..k).map(|_| rng.random_range(0.5..1.5)).collect());
    let mut key_mask = vec![true; k];
    key_mask[rng.random_range(0..k)] = false;
    let ids: Vec<usize> = (0..5).map(|_| rng.random_range(0..n)).collect();
    let r_ids = random_tensor(rng, ids.len(), k);
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let ce_mask: Vec<bool> = (0..n).map(|i| i != 1).collect();
    let r_cat = random_tensor(rng, n, 2 * k);
    let r_rows = random_tensor(rng, 2 * n, k);
    let r_slice = random_tensor(rng, n, 2);

    let max = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
    vec![
        (
            "matmul",
            max(check_inputs(&[a.clone(), b.clone()], |g, v| {
                let o = g.matmul(v[0], v[1])?;
                project(g, o, &r_nm)
            })),
        ),
        (
            "matmul_bt",
            max(check_inputs(&[a.clone(), bt.clone()], |g, v| {
                let o = g.matmul_bt(v[0], v[1])?;
                project(g, o, &r_nm)
            })),
        ),
        (
            "add",
            max(check_inputs(&[a.clone(), c.clone()], |g, v| {
                let o = g.add(v[0], v[1])?;
                project(g, o, &r_nk)
            })),
        ),
        (
            "add_row",
            max(check_inputs(&[a.clone(), bias.clone()], |g, v| {
                let o = g.add_row(v[0], v[1])?;
                project(g, o, &r_nk)
            })),
        ),
        (
            "linear",
            max(check_inputs(
                &[a.clone(), b.clone(), Tensor::vector(vec![0.3; m])],
                |g, v| {
                    let o = g.linear(v[0], v[1], v[2])?;
                    project(g, o, &r_nm)
                },
            )),
        ),
        (
            "mul",
            max(check_inputs(&[a.clone(), c.clone()], |g, v| {
                let o = g.mul(v[0], v[1])?;
                project(g, o, &r_nk)
            })),
        ),
        (
            "scale_by",
            max(check_inputs(&[s.clone(), a.clone()], |g, v| {
                let o = g.scale_by(v[0], v[1])?;
                project(g, o, &r_nk)
            })),
        ),
        (
            "scale",
            max(check_inputs(std::slice::from_ref(&a), |g, v| {
                let o = g.scale(v[0], -1.7);
                project(g, o, &r_nk)
            })),
        ),
        (
            "gelu",
            max(check_inputs(std::slice::from_ref(&a), |g, v| {
                let o = g.gelu(v[0]);
                project(g, o, &r_nk)
            })),
        ),
        (
            "softmax_rows",
            max(check_inputs(std::slice::from_ref(&a), |g, v| {
                let o = g.softmax_rows(v[0], None)?;
                project(g, o, &r_nk)
            })),
        ),
        (
            "softmax_rows_masked",
            max(check_inputs(std::slice::from_ref(&a), |g, v| {
                let o = g.softmax_rows(v[0], Some(&key_mask))?;
                project(g, o, &r_nk)
            })),
        ),
        (
            "layer_norm",
            max(check_inputs(
                &[a.clone(), gamma.clone(), bias.clone()],
                |g, v| {
                    let o = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                    project(g, o, &r_nk)
                },
            )),
        ),
        (
            "gather_rows",
            max(check_inputs(std::slice::from_ref(&a), |g, v| {
                let o = g.gather_rows(v[0], &ids)?;
                project(g, o, &r_ids)
            })),
        ),
        (
            "slice_cols",
            max(check_inputs(std::slice::from_ref(&a), |g, v| {
                let o = g.slice_cols(v[0], 1, 2)?;
                project(g, o, &r_slice)
            })),
        ),
        (
            "concat_cols",
            max(check_inputs(&[a.clone(), c.clone()], |g, v| {
                let o = g.concat_cols(&[v[0], v[1]])?;
                project(g, o, &r_cat)
            })),
        ),
        (
            "concat_rows",
            max(check_inputs(&[a.clone(), c.clone()], |g, v| {
                let o = g.concat_rows(&[v[0], v[1]])?;
                project(g, o, &r_rows)
            })),
        ),
        (
            "sum",
            max(check_inputs(std::slice::from_ref(&a), |g, v| {
                Ok(g.sum(v[0]))
            })),
        ),
        (
            "cross_entropy",
            max(check_inputs(std::slice::from_ref(&a), |g, v| {
                g.cross_entropy(v[0], &targets, &ce_mask)
            })),
        ),
    ]
}

/// Relative gradient error of `Σ adapter(x, V) ⊙ R` for every adapter
/// parameter and for `x`. Odd seeds use paired (tagged) features with one
/// padding row, even seeds plain retrieved rows.
pub fn adapter_errors(seed: u64) -> Vec<(String, f64)> {
    use rand::SeedableRng;
    use xadapter::xadapter::stack_paired_features;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = small_adapter();
    let mut layer = XAdapterLayer::init(cfg.clone(), seed).unwrap();
    randomize(&mut layer, &mut rng);
    let len = 3;
    let x = random_tensor(&mut rng, len, cfg.d_model);
    let v = if seed % 2 == 1 {
        let a = random_features(&mut rng, 2, cfg.feature_dim);
        let mut valid = vec![true; 3];
        valid[2] = false;
        let b = FeatureMatrix::with_mask(
            random_tensor(&mut rng, 3, cfg.feature_dim),
            valid,
            FeatureOrigin::Retrieved,
        )
        .unwrap();
        stack_paired_features(&a, &b).unwrap()
    } else {
        random_features(&mut rng, 4, cfg.feature_dim)
    };
    let r = random_tensor(&mut rng, len, cfg.d_model);

    let mut g = Graph::new();
    let p = layer.params().bind(&mut g);
    let xv = g.param(x.clone());
    let out = layer.forward_graph(&mut g, &p, xv, &v).unwrap();
    let loss = project(&mut g, out, &r).unwrap();
    let grads = g.backward(loss).unwrap();

    let value = |layer: &XAdapterLayer, x: &Tensor| -> f64 {
        let out = layer.forward(x, &v).unwrap();
        out.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let mut errors = Vec::new();
    let paths: Vec<String> = layer.params().paths().map(str::to_string).collect();
    for path in paths {
        let t = layer.params().get(&path).unwrap().clone();
        let analytic = grads
            .get(p.var(&path))
            .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec);
        let mut probe = layer.clone();
        let numeric = numeric_grad(t.data(), |vals| {
            probe
                .params_mut()
                .get_mut(&path)
                .unwrap()
                .data_mut()
                .copy_from_slice(vals);
            value(&probe, &x)
        });
        errors.push((path, rel_err(&analytic, &numeric)));
    }
    let numeric = numeric_grad(x.data(), |vals| {
        value(
            &layer,
            &Tensor::new(x.shape().to_vec(), vals.to_vec()).unwrap(),
        )
    });
    errors.push(("input".into(), rel_err(grads.get(xv).unwrap(), &numeric)));
    errors
}

/// Relative gradient error of the masked-LM loss of a small frozen encoder
/// with adapters in front of layers 1 and 2, for every adapter parameter.
pub fn stacked_errors(seed: u64) -> Vec<(String, f64)> {
    use rand::SeedableRng;
    use xadapter::adaptation::{evaluate_batch, mask_sequence, MaskingPolicy};
    use xadapter::encoder::{EncoderConfig, EncoderModel, SpecialIds};
    use xadapter::xadapter::{make_insertion_plan, ExpertKind, InsertionPlan};

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let enc = EncoderConfig {
        d_model: 6,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 8,
        vocab_size: 12,
        max_seq_len: 8,
        tie_head: true,
        special: SpecialIds::default(),
    };
    let mut model = EncoderModel::init(enc, seed).unwrap();
    model.freeze();
    let mut plan =
        make_insertion_plan(&[1, 2], ExpertKind::Visual, 2, &small_adapter(), seed).unwrap();
    for (_, layer) in plan.iter_mut() {
        randomize(layer, &mut rng);
    }
    let policy = MaskingPolicy::new(0.45).unwrap();
    let special = SpecialIds::default();
    let batch: Vec<_> = (0..2)
        .map(|_| {
            let mut ids = vec![special.cls];
            ids.extend((0..5).map(|_| rng.random_range(5..12u32)));
            ids.push(special.sep);
            let seq = xadapter::encoder::TokenSequence::from_ids(ids);
            mask_sequence(&seq, &policy, &special, 12, &mut rng).unwrap()
        })
        .collect();
    let feats: Vec<FeatureMatrix> = (0..2).map(|_| random_features(&mut rng, 3, 5)).collect();

    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let binding = plan.bind(&mut g);
    let refs: Vec<Option<&FeatureMatrix>> = feats.iter().map(Some).collect();
    let loss = model
        .masked_lm_loss_graph(&mut g, &p, &batch, Some((&plan, &binding)), &refs)
        .unwrap();
    let grads = g.backward(loss).unwrap();

    let mut errors = Vec::new();
    for pos in plan.positions() {
        let layer = plan.adapter(pos).unwrap();
        let bound = binding.get(pos).unwrap();
        for path in layer.params().paths() {
            let t = layer.params().get(path).unwrap();
            let analytic = grads
                .get(bound.var(path))
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec);
            let mut probe: InsertionPlan = plan.clone();
            let numeric = numeric_grad(t.data(), |vals| {
                probe
                    .adapter_mut(pos)
                    .unwrap()
                    .params_mut()
                    .get_mut(path)
                    .unwrap()
                    .data_mut()
                    .copy_from_slice(vals);
                evaluate_batch(&model, Some(&probe), &batch, &feats).unwrap()
            });
            errors.push((format!("pos{pos}.{path}"), rel_err(&analytic, &numeric)));
        }
    }
    errors
}
