use deskpick_nn::{Activation, ConvGeom, LayerSpec, Network, NnError, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn encoder(store: &mut ParamStore) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let geom = ConvGeom { kernel: 4, stride: 2, padding: 1 };
    Network::build(
        "enc",
        &[1, 64, 64],
        &[
            LayerSpec::conv(1, 8, geom, Activation::LeakyRelu),
            LayerSpec::conv(8, 16, geom, Activation::LeakyRelu),
            LayerSpec::conv(16, 32, geom, Activation::LeakyRelu),
            LayerSpec::dense(32 * 8 * 8, 32, Activation::Identity),
        ],
        store,
        &mut rng,
    )
    .unwrap()
}

#[test]
fn encoder_maps_depth_image_to_latent() {
    let mut store = ParamStore::new();
    let net = encoder(&mut store);
    let y = net.infer(&store, &Tensor::full(&[2, 1, 64, 64], 0.5)).unwrap();
    assert_eq!(y.shape(), &[2, 32]);
    assert_eq!(net.output_shape(), &[32]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_accepts_exactly_declared_shapes(
        dims in prop::collection::vec(1usize..6, 1..4),
        batch in 1usize..4,
    ) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::build(
            "d",
            &[2, 3],
            &[LayerSpec::dense(6, 2, Activation::Tanh)],
            &mut store,
            &mut rng,
        )
        .unwrap();
        let mut shape = vec![batch];
        shape.extend_from_slice(&dims);
        let x = Tensor::zeros(&shape);
        let res = net.infer(&store, &x);
        if dims == [2, 3] {
            let y = res.unwrap();
            prop_assert_eq!(y.shape(), &[batch, 2][..]);
        } else {
            let is_mismatch = matches!(res, Err(NnError::ShapeMismatch { .. }));
            prop_assert!(is_mismatch);
        }
    }
}
