//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

pub mod dd;

use std::path::Path;
use std::process::{Command, Output};

use cicd::exec::Execution;
use cicd::logits::{cosine_similarity, js_divergence, softmax, LogitVector};
use cicd::selector::EmbeddingStore;
use cicd::sim::calibrate::{calibrate, CalibrationSettings};
use cicd::sim::world::{build_world, SynthWorld, WorldConfig};

/// Distribution pairs with their divergence evaluated by mpmath at 50
/// significant digits. Every probability is written as its shortest
/// round-trip decimal, so both sides see the same doubles.
pub const FROZEN_JSD: [(&str, &[f64], &[f64], f64); 4] = [
    ("skewed", &[0.5, 0.25, 0.125, 0.0625, 0.0625], &[0.1, 0.2, 0.3, 0.2, 0.2], 0.130_600_968_621_730_536_722_334_5),
    (
        "near",
        &[0.1293533535688062, 0.1600612468289929, 0.2642686600659098, 0.13314792344090334, 0.14521207079672052, 0.16795674529866728],
        &[0.12935332111826225, 0.16006122268096323, 0.26426864662324107, 0.1331479299828024, 0.14521209245256914, 0.16795678714216208],
        3.305_414_945_517_442_840_394_652e-15,
    ),
    ("partial", &[0.7, 0.3, 0.0, 0.0], &[0.0, 0.4, 0.4, 0.2], 0.454_129_343_914_780_228_597_002_9),
    (
        "peaked",
        &[0.9999999999990001, 3.333333333333334e-13, 3.333333333333334e-13, 3.333333333333334e-13],
        &[0.25, 0.25, 0.25, 0.25],
        0.380_395_665_834_517_818_251_995,
    ),
];

pub fn log10_jsd(a: &LogitVector, b: &LogitVector) -> f64 {
    js_divergence(&softmax(a).unwrap(), &softmax(b).unwrap()).unwrap().log10_jsd
}

/// One dominant token plus two minor tokens whose logits are swapped between
/// the images. The divergence scales with the minor tokens' mass, so moving
/// the dominant logit by one ulp moves the divergence by a few ulps; varying
/// a two-token logit gap instead would move it in steps of about 1e-13.
fn swapped(lead: f64) -> (LogitVector, LogitVector) {
    (LogitVector::new(vec![lead, 0.0, -1.0]).unwrap(), LogitVector::new(vec![lead, -1.0, 0.0]).unwrap())
}

/// A logit pair whose computed `log10(jsd)` is as close to `target` as the
/// arithmetic allows: bisection on the dominant logit, then a scan over
/// neighbouring doubles for an exact hit.
pub fn pair_at_log10_jsd(target: f64) -> (LogitVector, LogitVector) {
    let f = |lead: f64| {
        let (a, b) = swapped(lead);
        log10_jsd(&a, &b)
    };
    let (mut lo, mut hi) = (0.0, 40.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Computed divergences are not monotone at the ulp level, so scan
    // outward from the bisection point instead of walking downhill.
    let mut best = lo;
    let (mut up, mut down) = (lo, lo);
    for _ in 0..(1 << 12) {
        for t in [up, down] {
            let x = f(t);
            if x == target {
                return swapped(t);
            }
            if (x - target).abs() < (f(best) - target).abs() {
                best = t;
            }
        }
        up = up.next_up();
        down = down.next_down();
    }
    swapped(best)
}

/// Least-similar id by a plain loop over the library's cosine, ties to the
/// smallest id. The argmin is defined over that function's values, so the
/// oracle checks the scan and tie handling, not the arithmetic.
pub fn brute_force_least_similar(store: &EmbeddingStore, query_id: &str, query: &[f64]) -> (String, f64) {
    let mut best: Option<(String, f64)> = None;
    for (id, v) in store.iter() {
        if id == query_id {
            continue;
        }
        let sim = cosine_similarity(query, v).expect("nonzero vectors");
        let better = match &best {
            None => true,
            Some((bid, bs)) => sim < *bs || (sim == *bs && id < bid.as_str()),
        };
        if better {
            best = Some((id.to_owned(), sim));
        }
    }
    best.expect("store has another id")
}

/// Cosine from the textbook formula with plain sums.
pub fn naive_cosine(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
}

pub fn calibrated_world(config: &WorldConfig, seed: u64) -> SynthWorld {
    let w = build_world(config, seed).expect("valid world config");
    calibrate(&w, &CalibrationSettings::default(), Execution::Parallel).expect("calibration succeeds")
}

pub fn cicd_bin() -> &'static str {
    env!("CARGO_BIN_EXE_cicd")
}

pub fn run_cli(cwd: &Path, args: &[&str]) -> Output {
    Command::new(cicd_bin()).current_dir(cwd).args(args).env_remove("CICD_SEED").output().expect("binary runs")
}

pub mod messages {
    use cicd::protocol::session::BackendInfo;
    use cicd::protocol::wire::{Payload, WireMessage, MESSAGE_TYPES};
    use rand::seq::IndexedRandom;
    use rand::Rng;

    const ALPHABET: &[&str] = &["a", "Z", "0", "_", "-", " ", "\"", "\\", "\n", "\t", "\u{0}", "é", "猫", "🐈", "{", "}"];

    pub fn string<R: Rng>(rng: &mut R, max: usize) -> String {
        let n = rng.random_range(0..=max);
        (0..n).map(|_| *ALPHABET.choose(rng).unwrap()).collect()
    }

    /// Any finite double, drawn from raw bit patterns half of the time.
    pub fn finite<R: Rng>(rng: &mut R) -> f64 {
        if rng.random_bool(0.5) {
            loop {
                let x = f64::from_bits(rng.random());
                if x.is_finite() {
                    return x;
                }
            }
        }
        rng.random_range(-50.0..50.0)
    }

    pub fn payload<R: Rng>(rng: &mut R) -> Payload {
        let kind = *MESSAGE_TYPES.choose(rng).unwrap();
        match kind {
            "hello" => Payload::Hello,
            "hello_ack" => {
                let n = rng.random_range(1..6);
                let tokens: Vec<String> = (0..n).map(|_| string(rng, 6)).collect();
                let mut info = BackendInfo::from_token_table(tokens, rng.random_bool(0.5).then(|| rng.random_range(0..n as u32)));
                if rng.random_bool(0.3) {
                    info.token_table = None;
                }
                if rng.random_bool(0.5) {
                    info.images = Some((0..rng.random_range(0..4)).map(|_| string(rng, 8)).collect());
                }
                Payload::HelloAck(info)
            }
            "init" => Payload::Init {
                image_id: string(rng, 12),
                prompt: (0..rng.random_range(0..8)).map(|_| rng.random()).collect(),
            },
            "init_ack" => Payload::InitAck,
            "step_request" => Payload::StepRequest { step: rng.random() },
            "logits" => {
                let n = rng.random_range(1..40);
                let step = rng.random();
                if rng.random_bool(0.5) {
                    Payload::dense_logits(step, (0..n).map(|_| finite(rng)).collect())
                } else {
                    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
                    Payload::packed_logits(step, &v)
                }
            }
            "feed" => Payload::Feed { token: rng.random() },
            "feed_ack" => Payload::FeedAck,
            "close" => Payload::Close,
            "error" => Payload::error(&string(rng, 10), string(rng, 30)),
            other => unreachable!("{other}"),
        }
    }

    pub fn message<R: Rng>(rng: &mut R) -> WireMessage {
        WireMessage::new(string(rng, 10), payload(rng))
    }
}
