//! Reference kernels checked against naive f64 scalar loops and their
//! algebraic properties on random instances.

use kernelforge_core::oracles::{
    builtin_task, fused_add_rmsnorm_ref, generate_inputs_for, merge_attn_states_lse_ref, silu_and_mul_ref,
    InputGenSpec, OracleRegistry, FUSED_ADD_RMSNORM, MERGE_ATTN_STATES_LSE, SILU_AND_MUL,
};
use kernelforge_core::suite::Inputs;
use kernelforge_core::task::ShapeFamily;
use kernelforge_core::tensor::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 100;

fn widen(t: &Tensor) -> Vec<f64> {
    t.to_f32_vec().into_iter().map(f64::from).collect()
}

fn max_abs(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - y).abs()).fold(0.0, f64::max)
}

fn tensor(inputs: &Inputs, name: &str) -> Tensor {
    inputs[name].as_tensor().unwrap().clone()
}

fn small_shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    match rank {
        3 => vec![
            rng.random_range(1..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=16),
        ],
        _ => vec![rng.random_range(1..=8), rng.random_range(1..=16)],
    }
}

// Naive direct-formula evaluations in f64, written independently of the
// library implementations (no max-subtraction for merge).

fn naive_merge(va: &[f64], sa: &[f64], vb: &[f64], sb: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = Vec::with_capacity(va.len());
    let mut s = Vec::with_capacity(sa.len());
    for i in 0..sa.len() {
        let ea = sa[i].exp();
        let eb = sb[i].exp();
        for d in 0..dim {
            v.push((ea * va[i * dim + d] + eb * vb[i * dim + d]) / (ea + eb));
        }
        s.push((ea + eb).ln());
    }
    (v, s)
}

fn naive_rmsnorm(x: &[f64], r: &[f64], w: &[f64], eps: f64) -> Vec<f64> {
    let d = w.len();
    let mut y = Vec::with_capacity(x.len());
    for row in 0..x.len() / d {
        let mut ss = 0.0;
        for j in 0..d {
            let h = x[row * d + j] + r[row * d + j];
            ss += h * h;
        }
        let denom = (ss / d as f64 + eps).sqrt();
        for j in 0..d {
            y.push((x[row * d + j] + r[row * d + j]) / denom * w[j]);
        }
    }
    y
}

fn naive_silu(x: &[f64], g: &[f64]) -> Vec<f64> {
    x.iter().zip(g).map(|(z, gate)| z / (1.0 + (-z).exp()) * gate).collect()
}

#[test]
fn merge_matches_naive_f64() {
    let task = builtin_task(MERGE_ATTN_STATES_LSE, DType::F32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let fam = ShapeFamily::new(small_shape(&mut rng, 3));
        let inputs = generate_inputs_for(&task, &fam, seed, &InputGenSpec::default()).unwrap();
        let (va, sa, vb, sb) = (
            tensor(&inputs, "v_a"),
            tensor(&inputs, "s_a"),
            tensor(&inputs, "v_b"),
            tensor(&inputs, "s_b"),
        );
        let (vo, so) = merge_attn_states_lse_ref(&va, &sa, &vb, &sb).unwrap();
        let (nv, ns) = naive_merge(&widen(&va), &widen(&sa), &widen(&vb), &widen(&sb), fam.extents[2]);
        worst = worst
            .max(max_abs(&vo.to_f32_vec(), &nv))
            .max(max_abs(&so.to_f32_vec(), &ns));
    }
    assert!(worst <= 1e-6, "merge max-abs vs f64 = {worst:e}");
}

#[test]
fn rmsnorm_matches_naive_f64() {
    let task = builtin_task(FUSED_ADD_RMSNORM, DType::F32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let fam = ShapeFamily::new(small_shape(&mut rng, 2));
        let inputs = generate_inputs_for(&task, &fam, seed, &InputGenSpec::default()).unwrap();
        let (x, r, w) = (
            tensor(&inputs, "x"),
            tensor(&inputs, "residual"),
            tensor(&inputs, "weight"),
        );
        let eps = inputs["eps"].as_scalar().unwrap();
        let y = fused_add_rmsnorm_ref(&x, &r, &w, eps).unwrap();
        let ny = naive_rmsnorm(&widen(&x), &widen(&r), &widen(&w), eps as f64);
        worst = worst.max(max_abs(&y.to_f32_vec(), &ny));
    }
    assert!(worst <= 1e-6, "rmsnorm max-abs vs f64 = {worst:e}");
}

#[test]
fn silu_matches_naive_f64() {
    let task = builtin_task(SILU_AND_MUL, DType::F32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let fam = ShapeFamily::new(small_shape(&mut rng, 2));
        let inputs = generate_inputs_for(&task, &fam, seed, &InputGenSpec::default()).unwrap();
        let (x, g) = (tensor(&inputs, "x"), tensor(&inputs, "g"));
        let out = silu_and_mul_ref(&x, &g).unwrap();
        worst = worst.max(max_abs(&out.to_f32_vec(), &naive_silu(&widen(&x), &widen(&g))));
    }
    assert!(worst <= 1e-6, "silu max-abs vs f64 = {worst:e}");
}

#[test]
fn merge_properties() {
    let task = builtin_task(MERGE_ATTN_STATES_LSE, DType::F32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for seed in 0..SEEDS {
        let fam = ShapeFamily::new(small_shape(&mut rng, 3));
        let inputs = generate_inputs_for(&task, &fam, seed, &InputGenSpec::default()).unwrap();
        let (va, sa, vb, sb) = (
            tensor(&inputs, "v_a"),
            tensor(&inputs, "s_a"),
            tensor(&inputs, "v_b"),
            tensor(&inputs, "s_b"),
        );
        let (vo, so) = merge_attn_states_lse_ref(&va, &sa, &vb, &sb).unwrap();
        let (vo2, so2) = merge_attn_states_lse_ref(&vb, &sb, &va, &sa).unwrap();

        let (a, b, out) = (va.to_f32_vec(), vb.to_f32_vec(), vo.to_f32_vec());
        for i in 0..out.len() {
            let lo = a[i].min(b[i]) - 1e-6;
            let hi = a[i].max(b[i]) + 1e-6;
            assert!(
                out[i] >= lo && out[i] <= hi,
                "seed {seed}: {} outside [{lo}, {hi}]",
                out[i]
            );
        }
        for (x, y) in out.iter().zip(vo2.to_f32_vec()) {
            assert!((x - y).abs() <= 1e-6);
        }
        for (x, y) in so.to_f32_vec().iter().zip(so2.to_f32_vec()) {
            assert!((x - y).abs() <= 1e-6);
        }
        let (sa64, sb64) = (widen(&sa), widen(&sb));
        for (i, s) in so.to_f32_vec().iter().enumerate() {
            let m = sa64[i].max(sb64[i]);
            let lae = m + ((sa64[i] - m).exp() + (sb64[i] - m).exp()).ln();
            assert!((*s as f64 - lae).abs() <= 1e-6);
        }
    }
}

#[test]
fn rmsnorm_properties() {
    let task = builtin_task(FUSED_ADD_RMSNORM, DType::F32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for seed in 0..SEEDS {
        let fam = ShapeFamily::new(small_shape(&mut rng, 2));
        let (rows, d) = (fam.extents[0], fam.extents[1]);
        let inputs = generate_inputs_for(&task, &fam, seed, &InputGenSpec::default()).unwrap();
        let (x, r) = (tensor(&inputs, "x"), tensor(&inputs, "residual"));
        let ones = Tensor::from_f32(vec![d], vec![1.0; d]).unwrap();

        let y = fused_add_rmsnorm_ref(&x, &r, &ones, 0.0).unwrap().to_f32_vec();
        for row in 0..rows {
            let ms: f64 = y[row * d..(row + 1) * d]
                .iter()
                .map(|v| (*v as f64).powi(2))
                .sum::<f64>()
                / d as f64;
            assert!(
                (ms.sqrt() - 1.0).abs() <= 1e-5,
                "seed {seed} row {row}: rms {}",
                ms.sqrt()
            );
        }

        let c: f32 = rng.random_range(0.1..10.0);
        let scale =
            |t: &Tensor| Tensor::from_f32(t.shape().to_vec(), t.to_f32_vec().iter().map(|v| v * c).collect()).unwrap();
        let w = tensor(&inputs, "weight");
        let base = fused_add_rmsnorm_ref(&x, &r, &w, 0.0).unwrap().to_f32_vec();
        let scaled = fused_add_rmsnorm_ref(&scale(&x), &scale(&r), &w, 0.0)
            .unwrap()
            .to_f32_vec();
        for (p, q) in base.iter().zip(&scaled) {
            assert!((p - q).abs() <= 1e-5, "seed {seed}: scale {c} moved {p} to {q}");
        }
    }
}

#[test]
fn silu_properties() {
    let task = builtin_task(SILU_AND_MUL, DType::F32).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for seed in 0..SEEDS {
        let fam = ShapeFamily::new(small_shape(&mut rng, 2));
        let inputs = generate_inputs_for(&task, &fam, seed, &InputGenSpec::default()).unwrap();
        let (x, g1) = (tensor(&inputs, "x"), tensor(&inputs, "g"));
        let g2 = generate_inputs_for(&task, &fam, seed + 1000, &InputGenSpec::default()).unwrap()["g"]
            .as_tensor()
            .unwrap()
            .clone();

        // zero at zero, exactly
        let mut xz = x.to_f32_vec();
        let zero_at = rng.random_range(0..xz.len());
        xz[zero_at] = 0.0;
        let xz = Tensor::from_f32(x.shape().to_vec(), xz).unwrap();
        assert_eq!(silu_and_mul_ref(&xz, &g1).unwrap().get_f32(zero_at), 0.0);

        let gsum = Tensor::from_f32(
            g1.shape().to_vec(),
            g1.to_f32_vec()
                .iter()
                .zip(g2.to_f32_vec())
                .map(|(a, b)| a + b)
                .collect(),
        )
        .unwrap();
        let lhs = silu_and_mul_ref(&x, &gsum).unwrap().to_f32_vec();
        let r1 = silu_and_mul_ref(&x, &g1).unwrap().to_f32_vec();
        let r2 = silu_and_mul_ref(&x, &g2).unwrap().to_f32_vec();
        for i in 0..lhs.len() {
            assert!((lhs[i] - (r1[i] + r2[i])).abs() <= 1e-5);
        }
    }
}

#[test]
fn registry_output_shapes_agree_with_signature() {
    let reg = OracleRegistry::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for id in [MERGE_ATTN_STATES_LSE, FUSED_ADD_RMSNORM, SILU_AND_MUL] {
        let task = builtin_task(id, DType::F16).unwrap();
        for seed in 0..10 {
            let fam = ShapeFamily::new(small_shape(&mut rng, task.shape_dims.len()));
            let inputs = generate_inputs_for(&task, &fam, seed, &InputGenSpec::default()).unwrap();
            let shapes = inputs
                .iter()
                .filter_map(|(k, v)| v.as_tensor().map(|t| (k.clone(), t.shape().to_vec())))
                .collect();
            let resolved = kernelforge_core::task::resolve_output_shapes(&task, &shapes).unwrap();
            let out = reg.evaluate(&task, &inputs).unwrap();
            for (k, s) in resolved {
                assert_eq!(out[&k].shape(), s.as_slice());
                assert_eq!(out[&k].dtype(), task.param(&k).unwrap().dtype);
            }
        }
    }
}
