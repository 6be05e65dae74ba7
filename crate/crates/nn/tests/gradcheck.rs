//! Central finite differences against tape gradients for every layer kind and activation.

use deskpick_nn::{Activation, ConvGeom, LayerSpec, Network, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const CASES: usize = 64;
/// Configurations with a pre-activation this close to a kink are resampled.
const KINK_MARGIN: f64 = 1e-3;

const ACTIVATIONS: [Activation; 4] = [
    Activation::Relu,
    Activation::LeakyRelu,
    Activation::Tanh,
    Activation::Identity,
];

/// Relative error with the denominator floored at 1e-6: below that, central
/// differences at h = 1e-5 are dominated by f64 round-off in the loss.
fn rel_err(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs()).max(1e-6)
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn weighted_sum(out: &Tensor, r: &Tensor) -> f64 {
    out.dot(r)
}

/// True when any layer's pre-activation sits within the kink margin.
fn near_kink(name: &str, specs: &[LayerSpec], store: &ParamStore, input: &Tensor) -> bool {
    for i in 0..specs.len() {
        if !matches!(specs[i].activation, Activation::Relu | Activation::LeakyRelu) {
            continue;
        }
        let mut prefix = specs[..=i].to_vec();
        prefix[i].activation = Activation::Identity;
        let mut twin_store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let twin = Network::build(name, &input.shape()[1..], &prefix, &mut twin_store, &mut rng)
            .unwrap();
        twin_store.copy_values_from_subset(store);
        let pre = twin.infer(&twin_store, input).unwrap();
        if pre.data().iter().any(|z| z.abs() < KINK_MARGIN) {
            return true;
        }
    }
    false
}

trait Subset {
    fn copy_values_from_subset(&mut self, other: &ParamStore);
}

impl Subset for ParamStore {
    fn copy_values_from_subset(&mut self, other: &ParamStore) {
        for id in self.ids().collect::<Vec<_>>() {
            let src = other.id(self.name(id)).expect("prefix parameter present");
            *self.value_mut(id) = other.value(src).clone();
        }
    }
}

/// Checks parameter and input gradients of `loss = Σ r ⊙ net(x)`; returns the worst relative error.
fn check(name: &str, input_shape: &[usize], specs: &[LayerSpec], rng: &mut ChaCha8Rng) -> f64 {
    let batch = rng.random_range(1..=3);
    let mut shape = vec![batch];
    shape.extend_from_slice(input_shape);
    let (mut store, net, x) = loop {
        let mut store = ParamStore::new();
        let net = Network::build(name, input_shape, specs, &mut store, rng).unwrap();
        // Random biases so every path is exercised.
        for id in net.param_ids() {
            if store.name(id).ends_with("bias") {
                let s = store.value(id).shape().to_vec();
                *store.value_mut(id) = random_tensor(rng, &s).map(|v| 0.3 * v);
            }
        }
        let x = random_tensor(rng, &shape);
        if !near_kink(name, specs, &store, &x) {
            break (store, net, x);
        }
    };
    let mut out_shape = vec![batch];
    out_shape.extend_from_slice(net.output_shape());
    let r = random_tensor(rng, &out_shape);

    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = net.forward(&tape, &store, xv).unwrap();
    let rv = tape.constant(r.clone());
    let loss = tape.sum(tape.mul(out, rv));
    let grads = tape.backward(loss).unwrap();
    store.zero_grad();
    tape.backward_into(loss, &mut store).unwrap();

    let mut worst: f64 = 0.0;
    for id in net.param_ids() {
        for k in 0..store.value(id).len() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + H;
            let fp = weighted_sum(&net.infer(&store, &x).unwrap(), &r);
            store.value_mut(id).data_mut()[k] = orig - H;
            let fm = weighted_sum(&net.infer(&store, &x).unwrap(), &r);
            store.value_mut(id).data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * H);
            let e = rel_err(store.grad(id).data()[k], numeric);
            assert!(
                e <= TOL,
                "{name}: {} [{k}] analytic {} numeric {numeric} rel {e}",
                store.name(id),
                store.grad(id).data()[k]
            );
            worst = worst.max(e);
        }
    }
    let gx = grads.get(xv).expect("input gradient");
    let mut xp = x.clone();
    for k in 0..x.len() {
        let orig = x.data()[k];
        xp.data_mut()[k] = orig + H;
        let fp = weighted_sum(&net.infer(&store, &xp).unwrap(), &r);
        xp.data_mut()[k] = orig - H;
        let fm = weighted_sum(&net.infer(&store, &xp).unwrap(), &r);
        xp.data_mut()[k] = orig;
        let numeric = (fp - fm) / (2.0 * H);
        let e = rel_err(gx.data()[k], numeric);
        assert!(e <= TOL, "{name}: input [{k}] analytic {} numeric {numeric}", gx.data()[k]);
        worst = worst.max(e);
    }
    worst
}

#[test]
fn dense_layers_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for act in ACTIVATIONS {
        for _ in 0..CASES {
            let i = rng.random_range(1..=6);
            let o = rng.random_range(1..=5);
            check("dense", &[i], &[LayerSpec::dense(i, o, act)], &mut rng);
        }
    }
}

#[test]
fn conv_layers_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for act in ACTIVATIONS {
        for _ in 0..CASES {
            let c = rng.random_range(1..=2);
            let o = rng.random_range(1..=3);
            let kernel = rng.random_range(1..=3);
            let stride = rng.random_range(1..=2);
            let padding = rng.random_range(0..kernel);
            let geom = ConvGeom { kernel, stride, padding };
            let hw = rng.random_range(kernel.max(3)..=6);
            check("conv", &[c, hw, hw], &[LayerSpec::conv(c, o, geom, act)], &mut rng);
        }
    }
}

#[test]
fn conv_transpose_layers_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for act in ACTIVATIONS {
        for _ in 0..CASES {
            let c = rng.random_range(1..=2);
            let o = rng.random_range(1..=3);
            let kernel = rng.random_range(1..=4);
            let stride = rng.random_range(1..=2);
            let padding = rng.random_range(0..kernel);
            let geom = ConvGeom { kernel, stride, padding };
            let hw = rng.random_range(2..=4);
            if geom.transpose_out(hw).is_none() {
                continue;
            }
            check("deconv", &[c, hw, hw], &[LayerSpec::conv_transpose(c, o, geom, act)], &mut rng);
        }
    }
}

#[test]
fn random_three_layer_nets_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..CASES {
        let a: Vec<Activation> = (0..3).map(|_| ACTIVATIONS[rng.random_range(0..4)]).collect();
        let geom = ConvGeom { kernel: 3, stride: 2, padding: 1 };
        let specs = [
            LayerSpec::conv(1, 2, geom, a[0]),
            LayerSpec::dense(2 * 3 * 3, 4, a[1]),
            LayerSpec::dense(4, 3, a[2]),
        ];
        check("net3", &[1, 6, 6], &specs, &mut rng);
    }
}

#[test]
fn encoder_decoder_stack_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let geom = ConvGeom { kernel: 4, stride: 2, padding: 1 };
    let specs = [
        LayerSpec::conv(1, 2, geom, Activation::LeakyRelu),
        LayerSpec::conv(2, 2, geom, Activation::LeakyRelu),
        LayerSpec::dense(2 * 2 * 2, 3, Activation::Identity),
        LayerSpec::dense(3, 8, Activation::LeakyRelu),
        LayerSpec::reshape(&[2, 2, 2]),
        LayerSpec::conv_transpose(2, 2, geom, Activation::LeakyRelu),
        LayerSpec::conv_transpose(2, 1, geom, Activation::Identity),
    ];
    for _ in 0..8 {
        check("ae", &[1, 8, 8], &specs, &mut rng);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let geom = ConvGeom { kernel: 3, stride: 1, padding: 1 };
        let net = Network::build(
            "d",
            &[1, 5, 5],
            &[
                LayerSpec::conv(1, 3, geom, Activation::Relu),
                LayerSpec::dense(75, 2, Activation::Tanh),
            ],
            &mut store,
            &mut rng,
        )
        .unwrap();
        let x = random_tensor(&mut rng, &[2, 1, 5, 5]);
        let tape = Tape::new();
        let xv = tape.leaf(x);
        let y = net.forward(&tape, &store, xv).unwrap();
        let loss = tape.sum(tape.square(y));
        tape.backward_into(loss, &mut store).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        let ids = net.param_ids();
        let out = bits(tape.value(y).data());
        (out, bits(&store.flat_grads(&ids)))
    };
    assert_eq!(run(), run());
}
