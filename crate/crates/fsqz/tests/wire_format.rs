//! Wire-format round trips over fuzzed payloads, DEFLATE behavior bands, and
//! golden fixture digests that pin the byte format.

mod common;

use fsqz::codec::{
    decode_message, deflate_bytes, encode_message, Direction, IndexMode, Payload,
};
use fsqz::compress::{global_magnitude_prune, QuantLayer, QuantizedModel};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// Bitwise payload equality: NaN payloads and signed zeros must survive the
/// wire exactly, which `==` on floats cannot express.
fn payload_bits_eq(a: &Payload, b: &Payload) -> bool {
    fn bits(v: &[f32]) -> Vec<u32> {
        v.iter().map(|x| x.to_bits()).collect()
    }
    match (a, b) {
        (Payload::Dense(x), Payload::Dense(y)) => bits(x) == bits(y),
        (
            Payload::Sparse {
                len: l1,
                indices: i1,
                values: v1,
                mode: m1,
            },
            Payload::Sparse {
                len: l2,
                indices: i2,
                values: v2,
                mode: m2,
            },
        ) => l1 == l2 && i1 == i2 && bits(v1) == bits(v2) && m1 == m2,
        (Payload::Quant(x), Payload::Quant(y)) => x == y,
        (Payload::Binary { signs: x }, Payload::Binary { signs: y }) => x == y,
        _ => false,
    }
}

fn dense_strategy() -> impl Strategy<Value = Payload> {
    prop::collection::vec(any::<u32>().prop_map(f32::from_bits), 0..200).prop_map(Payload::Dense)
}

fn sparse_strategy() -> impl Strategy<Value = Payload> {
    (1u64..400, prop::collection::vec(any::<u32>(), 0..64)).prop_flat_map(|(len, raw)| {
        let mut indices: Vec<u64> = raw.iter().map(|&r| r as u64 % len).collect();
        indices.sort_unstable();
        indices.dedup();
        let values: Vec<f32> = indices
            .iter()
            .enumerate()
            .map(|(k, _)| (k as f32 + 1.0) * 0.5)
            .collect();
        let modes = prop_oneof![Just(IndexMode::Varint), Just(IndexMode::Bitmap)];
        modes.prop_map(move |mode| Payload::Sparse {
            len,
            indices: indices.clone(),
            values: values.clone(),
            mode,
        })
    })
}

fn quant_strategy() -> impl Strategy<Value = Payload> {
    (
        prop_oneof![Just(4u8), Just(8u8)],
        prop::collection::vec(
            (any::<i8>(), prop::collection::vec(any::<i8>(), 0..60)),
            1..4,
        ),
    )
        .prop_map(|(bits, raw_layers)| {
            let qmax = (1i16 << (bits - 1)) - 1;
            let layers = raw_layers
                .into_iter()
                .map(|(scale_exp, codes)| QuantLayer {
                    scale_exp,
                    codes: codes
                        .into_iter()
                        .map(|c| (c as i16).clamp(-qmax, qmax) as i8)
                        .collect(),
                })
                .collect();
            Payload::Quant(QuantizedModel { bits, layers })
        })
}

fn binary_strategy() -> impl Strategy<Value = Payload> {
    prop::collection::vec(any::<bool>().prop_map(|b| if b { 1i8 } else { -1 }), 0..300)
        .prop_map(|signs| Payload::Binary { signs })
}

proptest! {
    #[test]
    fn any_payload_round_trips_bit_exactly(
        payload in prop_oneof![
            dense_strategy(),
            sparse_strategy(),
            quant_strategy(),
            binary_strategy()
        ],
        compress in any::<bool>(),
        round in any::<u32>(),
        sender in any::<u32>(),
        c2s in any::<bool>(),
    ) {
        let direction = if c2s { Direction::ClientToServer } else { Direction::ServerToClient };
        let bytes = encode_message(direction, round, sender, &payload, compress).unwrap();
        let (header, back) = decode_message(&bytes).unwrap();
        prop_assert!(payload_bits_eq(&payload, &back), "{payload:?} vs {back:?}");
        prop_assert_eq!(header.round, round);
        prop_assert_eq!(header.sender_id, sender);
        prop_assert_eq!(header.direction, direction);
        prop_assert_eq!(header.compressed, compress);
        prop_assert_eq!(header.param_count, payload.param_count());
        prop_assert_eq!(header.kind, payload.kind());
    }
}

fn gaussian_vec(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z as f32
        })
        .collect()
}

fn deflate_ratio(values: Vec<f32>) -> f64 {
    let raw = encode_message(Direction::ServerToClient, 0, 0, &Payload::Dense(values.clone()), false)
        .unwrap();
    let com =
        encode_message(Direction::ServerToClient, 0, 0, &Payload::Dense(values), true).unwrap();
    com.len() as f64 / raw.len() as f64
}

#[test]
fn deflate_shrinks_with_sparsity() {
    let v = gaussian_vec(150_000, 1);
    let mut last = f64::INFINITY;
    for theta in [0.3, 0.5, 0.7, 0.8, 0.9, 0.95] {
        let (pruned, _) = global_magnitude_prune(&v, theta, None).unwrap();
        let ratio = deflate_ratio(pruned);
        assert!(
            ratio < last,
            "ratio did not fall at rate {theta}: {ratio} vs {last}"
        );
        last = ratio;
    }
}

#[test]
fn deflate_extremes_behave() {
    let zeros = vec![0u8; 1 << 20];
    assert!(deflate_bytes(&zeros).len() < 2048);

    use rand::RngCore;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut noise = vec![0u8; 1 << 20];
    rng.fill_bytes(&mut noise);
    let out = deflate_bytes(&noise);
    assert!(out.len() >= (1 << 20) * 99 / 100);
    let bound = noise.len() + noise.len().div_ceil(65_535) * 5 + 11;
    assert!(out.len() <= bound);
}

/// Fixed messages whose exact bytes must never drift: same inputs, same
/// digest, forever. A format change that alters any of these is a breaking
/// change and must bump the wire version.
#[test]
fn golden_fixture_digests_are_stable() {
    let mut fixtures: Vec<(&str, Vec<u8>)> = Vec::new();

    let dense = gaussian_vec(257, 11);
    fixtures.push((
        "dense",
        encode_message(Direction::ServerToClient, 3, 0, &Payload::Dense(dense), false).unwrap(),
    ));

    let (pruned, _) = global_magnitude_prune(&gaussian_vec(1000, 12), 0.8, None).unwrap();
    fixtures.push((
        "sparse",
        encode_message(
            Direction::ClientToServer,
            5,
            2,
            &Payload::sparse_from_dense(&pruned),
            true,
        )
        .unwrap(),
    ));

    let model = fsqz::nn::init_model(&fsqz::nn::ModelSpec::new(vec![16, 8, 4], 13).unwrap()).unwrap();
    let q = fsqz::compress::quantize_model(&model, 4).unwrap();
    fixtures.push((
        "quant4",
        encode_message(Direction::ServerToClient, 1, 0, &Payload::Quant(q), true).unwrap(),
    ));

    let model = fsqz::nn::init_model(&fsqz::nn::ModelSpec::new(vec![16, 8, 4], 14).unwrap()).unwrap();
    let b = fsqz::compress::binarize_model(&model);
    let signs: Vec<i8> = b.layers.iter().flat_map(|l| l.codes.clone()).collect();
    fixtures.push((
        "binary",
        encode_message(Direction::ClientToServer, 9, 4, &Payload::Binary { signs }, false)
            .unwrap(),
    ));

    let expected = [
        (
            "dense",
            1054usize,
            "fe18eec3651cfef7b3eb8f45142138f0755993fd5c34fbd35aee10a2dfc84f91",
        ),
        (
            "sparse",
            934,
            "1e8b653664565bbd9f3a154dabb38a5c72e25347fb33dc7f9fe076c689410d69",
        ),
        (
            "quant4",
            130,
            "233aa95a3f30c9da2b97e171067be007fe91a7306eb7c1cd27e3643ead536fdb",
        ),
        (
            "binary",
            48,
            "0569d4f27e0d7260ca965cf4455fd17d9593bb71ba2b47cf7c055f0319105e79",
        ),
    ];
    for ((name, bytes), (ename, elen, edigest)) in fixtures.iter().zip(expected.iter()) {
        assert_eq!(name, ename);
        let digest: String = Sha256::digest(bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        assert_eq!(
            (*name, bytes.len(), digest.as_str()),
            (*ename, *elen, *edigest),
            "fixture {name} drifted"
        );
        // Each fixture must still decode.
        decode_message(bytes).unwrap();
    }
}
