use arfm::ar::guide;
use arfm::backbone::{Backbone, BackboneConfig};
use arfm::cond::{cond_ids, Alignment, CondIds, DropMask};
use arfm::fm::{dopri5, euler, fm_loss, sup_inpaint, zs_inpaint, ModelField, OtPath, VectorField};
use arfm::num::SeededRng;
use arfm::train::{backbone_for, Paradigm};
use arfm::world::{World, WorldSpec};
use arfm::Result;
use proptest::prelude::*;

fn vec_of(seed: u64, n: usize) -> Vec<f32> {
    SeededRng::new(seed).gauss_vec(n)
}

fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

/// Field of the OT path ending at `y1`.
fn oracle(path: OtPath, y1: Vec<f32>) -> impl FnMut(&[f32], f64) -> Result<Vec<f32>> {
    move |y: &[f32], tau: f64| path.target_field(tau, y, &y1)
}

proptest! {
    #[test]
    fn path_endpoints(seed in any::<u64>(), sigma in 0.0f64..0.1) {
        let path = OtPath::new(sigma).unwrap();
        let (y0, y1) = (vec_of(seed, 12), vec_of(seed ^ 1, 12));
        prop_assert!(close(&path.psi(0.0, &y0, &y1), &y0, 1e-6));
        let end: Vec<f32> = y0.iter().zip(&y1).map(|(a, b)| sigma as f32 * a + b).collect();
        prop_assert!(close(&path.psi(1.0, &y0, &y1), &end, 1e-6));
    }

    #[test]
    fn field_is_constant_along_its_path(seed in any::<u64>(), tau in 0.0f64..0.99) {
        let path = OtPath::default();
        let (y0, y1) = (vec_of(seed, 12), vec_of(seed ^ 1, 12));
        let v = path.target_field(tau, &path.psi(tau, &y0, &y1), &y1).unwrap();
        prop_assert!(close(&v, &path.velocity(&y0, &y1), 1e-5));
    }

    #[test]
    fn euler_lands_on_endpoint(seed in any::<u64>(), n in 1usize..60) {
        let path = OtPath::default();
        let (y0, y1) = (vec_of(seed, 12), vec_of(seed ^ 1, 12));
        let end = path.psi(1.0, &y0, &y1);
        let got = euler(&mut oracle(path, y1), y0, n, None).unwrap();
        prop_assert!(close(&got, &end, 1e-5));
    }

    #[test]
    fn inpainting_keeps_context(seed in any::<u64>(), len in 2usize..20, n in 1usize..8, at in 0.0f64..1.0, width in 0.0f64..1.0) {
        let dim = 3;
        let s = (at * len as f64) as usize;
        let e = s + ((len - s) as f64 * width).ceil() as usize;
        let z0 = vec_of(seed, len * dim);
        let bump = |y: &[f32], tau: f64| -> Result<Vec<f32>> { Ok(y.iter().map(|v| (v * 1.3).sin() + tau as f32).collect()) };
        let (mut f, mut g) = (bump, bump);
        let a = zs_inpaint(&mut f, &mut g, &z0, dim, s, e, n, vec_of(seed ^ 2, len * dim)).unwrap();
        let b = sup_inpaint(&mut f, &z0, dim, s, e, n, vec_of(seed ^ 3, len * dim)).unwrap();
        for out in [a, b] {
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&out[..s * dim]), bits(&z0[..s * dim]));
            prop_assert_eq!(bits(&out[e * dim..]), bits(&z0[e * dim..]));
        }
    }

    #[test]
    fn loss_is_zero_only_for_the_exact_field(seed in any::<u64>(), off in 0.01f32..1.0) {
        let path = OtPath::default();
        let z: Vec<Vec<f32>> = (0..3).map(|i| vec_of(seed ^ i, 8)).collect();
        let batch: Vec<&[f32]> = z.iter().map(|v| &v[..]).collect();
        let exact = |i: usize, y: &[f32], tau: f64| path.target_field(tau, y, batch[i]);
        let rngs = || (SeededRng::new(seed), SeededRng::new(seed ^ 7));
        let (mut a, mut b) = rngs();
        let l0 = fm_loss(&path, &batch, exact, &mut a, &mut b).unwrap();
        prop_assert!((0.0..1e-5).contains(&l0), "{}", l0);
        let shifted = |i: usize, y: &[f32], tau: f64| {
            Ok(path.target_field(tau, y, batch[i])?.iter().map(|v| v + off).collect())
        };
        let (mut a, mut b) = rngs();
        let l1 = fm_loss(&path, &batch, shifted, &mut a, &mut b).unwrap();
        prop_assert!(l1 > l0 + 0.5 * (off * off) as f64, "{} vs {}", l1, l0);
    }
}

#[test]
fn dopri5_error_shrinks_with_tolerance() {
    let errs: Vec<f64> = [1e-2, 1e-3, 1e-4]
        .iter()
        .map(|&rtol| {
            let mut f = |y: &[f32], _: f64| -> Result<Vec<f32>> { Ok(y.to_vec()) };
            let out = dopri5(&mut f, vec![1.0], rtol, 1e-9, 10_000, None).unwrap();
            let err = (out.y[0] as f64 - std::f64::consts::E).abs();
            assert!(err < 10.0 * rtol);
            err
        })
        .collect();
    assert!(errs[0] >= errs[1] && errs[1] >= errs[2], "{errs:?}");
    assert!(errs[2] < errs[0], "{errs:?}");
}

#[test]
fn dopri5_is_exact_on_low_degree_polynomials() {
    let mut f = |y: &[f32], t: f64| -> Result<Vec<f32>> { Ok(y.iter().map(|_| (3.0 * t * t * t - t + 0.5) as f32).collect()) };
    let out = dopri5(&mut f, vec![0.25, -1.0], 1e-3, 1e-6, 1000, None).unwrap();
    let gain = 0.75 - 0.5 + 0.5;
    assert!((out.y[0] as f64 - (0.25 + gain)).abs() < 1e-6);
    assert!((out.y[1] as f64 - (-1.0 + gain)).abs() < 1e-6);
    assert!(out.accepted <= 3, "{} steps", out.accepted);
}

#[test]
fn guided_model_field_endpoints() {
    let w = World::new(WorldSpec::default()).unwrap();
    let base = BackboneConfig {
        n_blocks: 2,
        model_dim: 16,
        n_heads: 2,
        ff_dim: 16,
        cond_dim: 4,
        caption_vocab: arfm::world::caption::VOCAB,
        max_len: 64,
        attn_window: None,
        ..BackboneConfig::default()
    };
    let mut rng = SeededRng::new(1);
    let mut m = Backbone::new(backbone_for(w.spec(), Paradigm::Fm, &base), &mut rng).unwrap();
    for v in &mut m.params.data {
        for x in v.iter_mut() {
            *x += 0.3 * rng.gauss();
        }
    }
    let s = w.gen_sample(&mut rng, 0.4).unwrap();
    let vocab = w.spec().cond_vocab();
    let cond = cond_ids(&s.controls, &vocab, DropMask::NONE, Alignment::Flow);
    let y = rng.gauss_vec(s.latent.data().len());
    let at = |cond: CondIds, caption: &[u32], alpha: f64| {
        let mut f = ModelField::new(&m, cond, caption, alpha);
        let v = f.eval(&y, 0.3).unwrap();
        (v, f.evals)
    };
    let (c, n1) = at(cond.clone(), &s.caption, 1.0);
    let (u, n0) = at(cond.clone(), &s.caption, 0.0);
    let (null, _) = at(CondIds::null(&vocab, cond.len), &[], 1.0);
    assert_eq!(u, null);
    assert_ne!(c, u);
    assert_eq!((n0, n1), (1, 1));
    let (mix, n) = at(cond, &s.caption, 2.5);
    assert_eq!(mix, guide(&c, &u, 2.5));
    assert_eq!(n, 2);
}
