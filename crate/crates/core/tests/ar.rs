use arfm::ar::{
    ce_loss, decode, fim_inpaint, guide, sample, softmax, top_k_filter, top_p_filter, ArExample, ArSamplerConfig,
    CeMode, DecodeJob, Decoder,
};
use arfm::backbone::{Backbone, BackboneConfig};
use arfm::cond::DropMask;
use arfm::delay::TokenGrid;
use arfm::num::SeededRng;
use arfm::train::{backbone_for, Paradigm};
use arfm::world::{World, WorldSpec};
use proptest::prelude::*;

fn world() -> World {
    World::new(WorldSpec::default()).unwrap()
}

fn model(w: &World, seed: u64) -> Backbone<f32> {
    let base = BackboneConfig {
        n_blocks: 2,
        model_dim: 16,
        n_heads: 2,
        ff_dim: 32,
        cond_dim: 4,
        caption_vocab: arfm::world::caption::VOCAB,
        max_len: 128,
        attn_window: None,
        ..BackboneConfig::default()
    };
    let mut rng = SeededRng::new(seed);
    let mut m = Backbone::new(backbone_for(w.spec(), Paradigm::Ar, &base), &mut rng).unwrap();
    for v in &mut m.params.data {
        for x in v.iter_mut() {
            *x += 0.3 * rng.gauss();
        }
    }
    m
}

fn probs() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-6.0f32..6.0, 2..40).prop_map(|l| softmax(&l, 1.0))
}

fn assert_distribution(p: &[f64]) {
    assert!(p.iter().all(|&x| x >= 0.0));
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
}

proptest! {
    #[test]
    fn filters_keep_a_distribution(p in probs(), k in 1usize..40, top in 0.01f64..1.0) {
        let mut a = p.clone();
        top_k_filter(&mut a, k.min(p.len()));
        assert_distribution(&a);
        prop_assert!(a.iter().filter(|&&x| x > 0.0).count() <= k);
        let mut b = p.clone();
        top_p_filter(&mut b, top);
        assert_distribution(&b);
    }

    #[test]
    fn filters_at_their_limits_are_identity(p in probs()) {
        let mut a = p.clone();
        top_k_filter(&mut a, p.len());
        prop_assert_eq!(&a, &p);
        let mut b = p.clone();
        top_p_filter(&mut b, 1.0);
        prop_assert_eq!(&b, &p);
    }

    #[test]
    fn guidance_endpoints_are_exact(
        c in prop::collection::vec(-50.0f32..50.0, 1..20),
        seed in any::<u64>(),
    ) {
        let u = SeededRng::new(seed).gauss_vec(c.len());
        prop_assert_eq!(guide(&c, &u, 0.0), u.clone());
        prop_assert_eq!(guide(&c, &u, 1.0), c.clone());
    }

    #[test]
    fn per_class_ce_is_standard_over_card(seed in any::<u64>(), nb in 1usize..4, len in 1usize..6, card in 2u32..9) {
        let mut rng = SeededRng::new(seed);
        let cells = (0..nb * len).map(|_| rng.below(card as usize) as u32).collect();
        let t = TokenGrid::new(nb, len, card, cells).unwrap();
        let logits: Vec<f32> = (0..len * nb * card as usize).map(|_| 3.0 * rng.gauss()).collect();
        let std = ce_loss(&logits, &t, CeMode::Standard).unwrap();
        let per_class = ce_loss(&logits, &t, CeMode::PerClass).unwrap();
        prop_assert!((per_class - std / card as f64).abs() < 1e-6);
    }
}

#[test]
fn sampling_is_deterministic() {
    let w = world();
    let m = model(&w, 1);
    let s = w.gen_sample(&mut SeededRng::new(9), 0.5).unwrap();
    let cfg = ArSamplerConfig {
        max_frames: s.latent.len(),
        top_k: Some(8),
        ..ArSamplerConfig::default()
    };
    let reqs = [(&s.caption[..], Some(&s.controls)), (&[][..], None)];
    let a = sample(&m, &reqs, &cfg, &SeededRng::new(3)).unwrap();
    let b = sample(&m, &reqs, &cfg, &SeededRng::new(3)).unwrap();
    assert_eq!(a, b);
    let c = sample(&m, &reqs, &cfg, &SeededRng::new(4)).unwrap();
    assert_ne!(a, c);
    // Elements do not depend on their batch neighbours.
    let solo = sample(&m, &reqs[..1], &cfg, &SeededRng::new(3)).unwrap();
    assert_eq!(solo[0], a[0]);
}

#[test]
fn greedy_cached_equals_recompute() {
    let w = world();
    let m = model(&w, 2);
    let cfg = ArSamplerConfig {
        max_frames: 12,
        ..ArSamplerConfig::greedy()
    };
    let root = SeededRng::new(5);
    for i in 0..10 {
        let mut rng = root.substream(i);
        let s = w.gen_sample(&mut rng, 0.24).unwrap();
        let mut job = DecodeJob::fresh(&m, 12, &s.caption, Some(&s.controls));
        job.prefix = s.tokens.slice_frames(0, 1 + rng.below(4));
        let mut r1 = vec![SeededRng::new(0)];
        let mut r2 = vec![SeededRng::new(0)];
        let a = decode(&m, &[job.clone()], &cfg, &mut r1, Decoder::Cached).unwrap();
        let b = decode(&m, &[job], &cfg, &mut r2, Decoder::Recompute).unwrap();
        assert_eq!(a, b, "prompt {i}");
    }
}

#[test]
fn fim_keeps_context_frames() {
    let w = world();
    let m = model(&w, 3);
    let root = SeededRng::new(6);
    for i in 0..8 {
        let mut rng = root.substream(i);
        let s = w.gen_sample(&mut rng, 0.4).unwrap();
        let len = s.tokens.len();
        let a = 1 + rng.below(len - 2);
        let b = a + 1 + rng.below(len - 1 - a);
        let cfg = ArSamplerConfig {
            max_frames: len,
            ..ArSamplerConfig::default()
        };
        let out = fim_inpaint(&m, &s.tokens, Some(&s.controls), &s.caption, a, b, &cfg, &mut rng).unwrap();
        assert_eq!(out.slice_frames(0, a), s.tokens.slice_frames(0, a));
        assert_eq!(out.slice_frames(b, len), s.tokens.slice_frames(b, len));
        assert!(out.cells().iter().all(|&t| t < out.card()));
    }
}

#[test]
fn untrained_loss_is_near_uniform() {
    let w = world();
    let base = BackboneConfig {
        n_blocks: 2,
        model_dim: 32,
        n_heads: 2,
        ff_dim: 64,
        cond_dim: 8,
        caption_vocab: arfm::world::caption::VOCAB,
        max_len: 1024,
        attn_window: Some(16),
        ..BackboneConfig::default()
    };
    let m = Backbone::new(backbone_for(w.spec(), Paradigm::Ar, &base), &mut SeededRng::new(0)).unwrap();
    let vocab = w.spec().cond_vocab();
    let (mut nll, mut n) = (0.0, 0);
    for i in 0..4 {
        let s = w.gen_sample(&mut SeededRng::new(i), 2.0).unwrap();
        let ex = ArExample::plain(&s.tokens, &s.controls, &vocab, &s.caption, DropMask::NONE).unwrap();
        let (l, c) = ex.nll(&m).unwrap();
        nll += l;
        n += c;
    }
    let loss = nll / n as f64;
    let uniform = (w.spec().codebook_size as f64).ln();
    assert!((loss / uniform - 1.0).abs() < 0.1, "loss {loss} vs {uniform}");
}
