mod common;

use hyperpeft::host::Seq2SeqBatch;
use hyperpeft::hypernet::{
    AdapterVars, ConditioningInput, HyperNet, LoraPairVars, PositionId, LAYER_EMBEDDING, POSITION_EMBEDDING,
    PROJECTOR_HIDDEN_WEIGHT, PROJECTOR_OUT_BIAS, TASK_EMBEDDING,
};
use hyperpeft::peft::{adapter_forward, conditional_layer_norm, lora_linear_forward};
use hyperpeft::trainer::make_batch;
use hyperpeft::Tensor;
use hyperpeft_tensor::{Tape, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn project<'t>(tape: &'t Tape<f64>, x: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let w = tape.constant(rand(&x.shape(), seed));
    x.mul(&w).sum_all()
}

/// Worst relative error between tape gradients and central differences.
fn check<F>(inputs: Vec<Tensor<f64>>, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone(), true)).collect();
    let grads = tape.backward(f(&tape, &vars));
    let eval = |ins: &[Tensor<f64>]| {
        let tape = Tape::new();
        let vars: Vec<_> = ins.iter().map(|t| tape.var(t.clone(), false)).collect();
        f(&tape, &vars).value().data()[0]
    };
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    worst
}

#[test]
fn gradcheck_conditional_layer_norm() {
    let err = check(vec![rand(&[3, 8], 1), rand(&[8], 2), rand(&[8], 3)], |t, v| {
        project(t, conditional_layer_norm(&v[0], &v[1], &v[2]).unwrap(), 4)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradcheck_adapter() {
    let err = check(
        vec![rand(&[2, 3, 8], 5), rand(&[2, 8], 6), rand(&[8, 2], 7), rand(&[8], 8), rand(&[8], 9)],
        |t, v| {
            let p = AdapterVars { down: v[1], up: v[2], gamma: v[3], beta: v[4] };
            project(t, adapter_forward(&v[0], &p).unwrap(), 10)
        },
    );
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradcheck_lora() {
    let err = check(vec![rand(&[4, 6], 11), rand(&[5, 6], 12), rand(&[3, 6], 13), rand(&[5, 3], 14)], |t, v| {
        let p = LoraPairVars { a: v[2], b: v[3] };
        project(t, lora_linear_forward(&v[0], &v[1], &p).unwrap(), 15)
    });
    assert!(err < 1e-4, "{err}");
}

/// Perturbs individual hypernetwork entries and compares with the tape.
fn hypernet_check(hn: &mut HyperNet<f64>, names: &[&str], loss: impl Fn(&HyperNet<f64>, bool) -> (f64, Vec<(String, Tensor<f64>)>)) -> f64 {
    let (_, grads) = loss(hn, true);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for &name in names {
        let g = grads.iter().find(|(n, _)| n == name).map(|(_, g)| g.clone()).unwrap();
        let n = hn.params().get(name).unwrap().numel();
        for j in (0..n).step_by((n / 24).max(1)) {
            let orig = hn.params().get(name).unwrap().data()[j];
            hn.params_mut().get_mut(name).unwrap().data_mut()[j] = orig + h;
            let plus = loss(hn, false).0;
            hn.params_mut().get_mut(name).unwrap().data_mut()[j] = orig - h;
            let minus = loss(hn, false).0;
            hn.params_mut().get_mut(name).unwrap().data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = g.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        }
    }
    worst
}

#[test]
fn gradcheck_conditioning_embedding() {
    let mut hn = HyperNet::<f64>::new(common::hypernet_config(8, 3, 1), 4).unwrap();
    let inputs = [
        ConditioningInput::new(0, 0, PositionId::AdapterAfterSelfAttn),
        ConditioningInput::new(2, 1, PositionId::LoraBCrossAttn),
        ConditioningInput::new(1, 1, PositionId::AdapterAfterFfn),
    ];
    let loss = |hn: &HyperNet<f64>, grad: bool| {
        let tape = Tape::new();
        let vars = hn.params().bind(&tape, |_| grad);
        let c = hn.condition_batch(&vars, &inputs).unwrap();
        // scale up so the tiny initial weights give well-conditioned differences
        let out = project(&tape, c.scale(100.0), 21);
        let value = out.value().data()[0];
        if !grad {
            return (value, Vec::new());
        }
        let mut g = tape.backward(out);
        (value, vars.collect_grads(&mut g).into_iter().collect())
    };
    let names = [TASK_EMBEDDING, LAYER_EMBEDDING, POSITION_EMBEDDING, PROJECTOR_HIDDEN_WEIGHT, PROJECTOR_OUT_BIAS];
    let err = hypernet_check(&mut hn, &names, loss);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gradcheck_full_model_through_generated_weights() {
    let toy = common::toy::<f64>(8, 8, 1, 3);
    let batch: Seq2SeqBatch = make_batch(&toy.tasks[0].train, &[0, 1]);
    let (host, mut hn) = toy.model.into_parts();
    // nudge the delta heads away from their near-zero init
    let deltas: Vec<String> =
        hn.params().names().filter(|n| n.contains("lora_b") || n.contains("adapter_up")).map(String::from).collect();
    for (k, name) in deltas.iter().enumerate() {
        let t = hn.params_mut().get_mut(name).unwrap();
        *t = rand(t.shape(), 77 + k as u64).map(|v| v * 0.1);
    }
    let plan = hyperpeft::peft::InsertionPlan::standard(1, 1, true, true);
    let policy = hyperpeft::peft::FreezePolicy::default();
    let names: Vec<String> = hn.params().names().filter(|n| !n.ends_with("/bias")).map(String::from).collect();
    let loss = |hn: &HyperNet<f64>, grad: bool| {
        let model = hyperpeft::peft::instrument_host(host.clone(), hn.clone(), plan.clone(), policy).unwrap();
        let tape = Tape::new();
        let (hv, nv) = model.bind(&tape, grad);
        let l = model.loss(&hv, &nv, &batch, 1.0).unwrap();
        let value = l.value().data()[0];
        if !grad {
            return (value, Vec::new());
        }
        let mut g = tape.backward(l);
        (value, nv.collect_grads(&mut g).into_iter().collect())
    };
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let err = hypernet_check(&mut hn, &refs, loss);
    assert!(err < 1e-4, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lora_is_linear_in_x(seed in 0u64..1000, alpha in -3.0f64..3.0) {
        let tape = Tape::new();
        let x1 = tape.constant(rand(&[3, 6], seed));
        let x2 = tape.constant(rand(&[3, 6], seed + 1));
        let w0 = tape.constant(rand(&[5, 6], seed + 2));
        let p = LoraPairVars { a: tape.constant(rand(&[2, 6], seed + 3)), b: tape.constant(rand(&[5, 2], seed + 4)) };
        let lhs = lora_linear_forward(&x1.add(&x2.scale(alpha)), &w0, &p).unwrap();
        let rhs = lora_linear_forward(&x1, &w0, &p).unwrap().add(&lora_linear_forward(&x2, &w0, &p).unwrap().scale(alpha));
        prop_assert!(lhs.value().max_abs_diff(&rhs.value()) < 1e-10);
    }

    #[test]
    fn lora_with_zero_b_is_the_frozen_projection(seed in 0u64..1000) {
        let tape = Tape::<f32>::new();
        let r = |s: &[usize], k| rand(s, k).cast::<f32>();
        let x = tape.constant(r(&[4, 8], seed));
        let w0 = tape.constant(r(&[8, 8], seed + 1));
        let p = LoraPairVars { a: tape.constant(r(&[2, 8], seed + 2)), b: tape.constant(Tensor::zeros(&[8, 2])) };
        let out = lora_linear_forward(&x, &w0, &p).unwrap();
        let base = x.matmul(&w0, true);
        prop_assert!(out.value().max_abs_diff(&base.value()) < 1e-6);
    }

    #[test]
    fn layer_norm_output_is_normalized(seed in 0u64..1000) {
        let tape = Tape::<f64>::new();
        let x = tape.constant(rand(&[5, 16], seed).map(|v| 3.0 * v + 1.0));
        let g = tape.constant(Tensor::ones(&[16]));
        let b = tape.constant(Tensor::zeros(&[16]));
        let y = conditional_layer_norm(&x, &g, &b).unwrap().value();
        for r in 0..5 {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }
}

#[test]
fn shape_mismatch_is_a_contract_error() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(rand(&[2, 6], 1));
    let g = tape.constant(Tensor::ones(&[5]));
    let b = tape.constant(Tensor::zeros(&[6]));
    assert!(matches!(conditional_layer_norm(&x, &g, &b), Err(hyperpeft::Error::Contract(_))));
    let w0 = tape.constant(rand(&[4, 6], 2));
    let p = LoraPairVars { a: tape.constant(rand(&[2, 6], 3)), b: tape.constant(rand(&[4, 3], 4)) };
    assert!(lora_linear_forward(&x, &w0, &p).is_err());
}
