mod support;

use std::collections::BTreeSet;
use std::sync::Arc;

use cicd::exec::Execution;
use cicd::experiment::analyze_world;
use cicd::logits::{js_divergence, softmax, LogitVector};
use cicd::sim::world::{build_world, trap_world, SlotKind, SynthWorld, TrapConfig, WorldConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn jsd(world: &SynthWorld, a: usize, b: usize, tokens: &[u32]) -> f64 {
    let d = |i| softmax(&LogitVector::new(world.next_logits(i, tokens)).unwrap()).unwrap();
    js_divergence(&d(a), &d(b)).unwrap().jsd
}

fn random_prefix(world: &SynthWorld, rng: &mut ChaCha8Rng, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.random_range(0..world.vocab_size() as u32)).collect()
}

#[test]
fn function_slots_ignore_the_image() {
    let world = build_world(&WorldConfig::default(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = world.images.len();
    let mut checked = 0;
    for _ in 0..300 {
        let len = rng.random_range(0..world.template_len());
        if world.slot_kind(len) != SlotKind::Function {
            continue;
        }
        let prefix = random_prefix(&world, &mut rng, len);
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        assert_eq!(world.next_logits(a, &prefix), world.next_logits(b, &prefix));
        assert_eq!(jsd(&world, a, b, &prefix), 0.0);
        checked += 1;
    }
    assert!(checked > 50);
}

#[test]
fn object_slots_separate_disjoint_images() {
    let world = build_world(&WorldConfig::default(), 0).unwrap();
    let sets: Vec<BTreeSet<usize>> = world.images.iter().map(|i| i.objects.iter().copied().collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut disjoint = 0;
    for a in 0..sets.len() {
        for b in (a + 1)..sets.len().min(a + 8) {
            let len = (0..world.template_len()).find(|&k| world.slot_kind(k) == SlotKind::Object).unwrap();
            let prefix = random_prefix(&world, &mut rng, len);
            let d = jsd(&world, a, b, &prefix);
            if sets[a] != sets[b] {
                assert!(d > 0.0, "{a} vs {b}");
            }
            if sets[a].is_disjoint(&sets[b]) {
                assert!(d > 1e-2, "{a} vs {b}: {d}");
                disjoint += 1;
            }
        }
    }
    assert!(disjoint > 0);
}

#[test]
fn trap_argmax_is_the_absent_object() {
    let world = trap_world(&TrapConfig::default(), 0).unwrap();
    let prefix = [1, 2, world.object_token(0), 3, 4];
    assert_eq!(world.slot_kind(prefix.len()), SlotKind::Object);
    let logits = world.next_logits(0, &prefix);
    let best = (0..logits.len()).max_by(|&i, &j| logits[i].total_cmp(&logits[j])).unwrap();
    assert_eq!(world.token_object(best as u32), Some(1));
    assert!(!world.ground_truth_objects("img_0").unwrap().contains(&1));
}

#[test]
fn world_round_trips_through_json() {
    let world = build_world(&WorldConfig { n_images: 10, ..WorldConfig::default() }, 3).unwrap();
    let back = SynthWorld::from_json(&world.to_json()).unwrap();
    assert_eq!(back.to_json(), world.to_json());
    assert_eq!(back.next_logits(4, &[1, 2, 3]), world.next_logits(4, &[1, 2, 3]));
}

#[test]
fn consistency_report_separates_slot_kinds() {
    let world = Arc::new(build_world(&WorldConfig::default(), 0).unwrap());
    let r = analyze_world(&world, 40, 0, Execution::Parallel).unwrap();
    assert_eq!(r.function.zero_jsd_fraction, 1.0);
    assert_eq!(r.function.jsd.max, 0.0);
    assert!(r.object.steps > 0);
    assert!(r.object.cosine_distance.mean > r.function.cosine_distance.mean);
    assert_eq!(r, analyze_world(&world, 40, 0, Execution::Sequential).unwrap());
}
