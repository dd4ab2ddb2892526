mod common;

use common::{jitter, rand_tensor, random_images, random_masks, rng, tiny_aux, tiny_vit};
use pixrl::augment::{per_patch_normalize, sample_mask, MaskSet, CROP_SIZE, INPUT_SIZE, MAX_OFFSET};
use pixrl::auxtasks::{
    contrastive_pair, data2vec_loss, data2vec_objective, data2vec_target, info_nce, mae_forward, mae_loss, AuxConfig,
    AuxInput, AuxModule, AuxNet, AuxTask,
};
use pixrl::encoders::{patchify, TokenMask, Vit, VitConfig};
use pixrl_nn::layers::Bind;
use pixrl_nn::{Container, Graph, ParamStore, Tensor};
use pixrl_numcheck::brute_force_infonce;
use proptest::prelude::*;

fn layer_norm_rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|r| {
            let row = t.row(r);
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter().map(|v| (v - mu) / (var + 1e-5).sqrt()).collect()
        })
        .collect()
}

fn vit_f64(cfg: &VitConfig, seed: u64) -> (Vit, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let vit = Vit::new(&mut store, cfg, &mut r).unwrap();
    jitter(&mut store, &mut r, 0.1);
    (vit, store)
}

// ---------------------------------------------------------------- Data2Vec

#[test]
fn single_term_target_is_the_normalized_last_block() {
    let cfg = tiny_vit();
    let (vit, store) = vit_f64(&cfg, 1);
    let images = random_images(&mut rng(2), 2, cfg.in_channels, cfg.image_size);
    let patches = patchify(&images, cfg.patch_size).unwrap();
    let mut g = Graph::new();
    let t = data2vec_target(&mut g, &vit, &store, &patches, 2, 1).unwrap();
    let tokens = vit.embed(&mut g, Bind::frozen(&store), &patches, 2, TokenMask::Full).unwrap();
    let last = vit.forward(&mut g, Bind::frozen(&store), tokens, 0).unwrap().tokens;
    let want = layer_norm_rows(g.value(last));
    for (r, w) in want.iter().enumerate() {
        for (a, b) in g.value(t.target).row(r).iter().zip(w) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn two_term_target_sums_recomputed_summands() {
    let cfg = tiny_vit();
    let (vit, store) = vit_f64(&cfg, 3);
    let images = random_images(&mut rng(4), 2, cfg.in_channels, cfg.image_size);
    let patches = patchify(&images, cfg.patch_size).unwrap();
    let mut g = Graph::new();
    let t = data2vec_target(&mut g, &vit, &store, &patches, 2, 2).unwrap();
    let tokens = vit.embed(&mut g, Bind::frozen(&store), &patches, 2, TokenMask::Full).unwrap();
    let out = vit.forward(&mut g, Bind::frozen(&store), tokens, 2).unwrap();
    assert_eq!(out.activations.len(), 2);
    let a = layer_norm_rows(g.value(out.activations[0]));
    let b = layer_norm_rows(g.value(out.activations[1]));
    for r in 0..a.len() {
        for j in 0..cfg.embed_dim {
            assert!((g.value(t.target).row(r)[j] - (a[r][j] + b[r][j])).abs() < 1e-12);
        }
    }
}

#[test]
fn target_summands_have_zero_token_mean() {
    let cfg = VitConfig::default();
    let mut store = ParamStore::<f32>::new();
    let vit = Vit::new(&mut store, &cfg, &mut rng(5)).unwrap();
    let images = Tensor::<f32>::from_fn(&[2, 9, 84, 84], |i| ((i * 97) % 256) as f32 / 255.0);
    let patches = patchify(&images, 12).unwrap();
    let mut g = Graph::new();
    let t = data2vec_target(&mut g, &vit, &store, &patches, 2, 2).unwrap();
    assert_eq!(t.summands.len(), 2);
    for &s in &t.summands {
        let v = g.value(s);
        assert_eq!(v.shape(), &[98, 128]);
        for r in 0..v.rows() {
            let mean = v.row(r).iter().map(|&x| x as f64).sum::<f64>() / 128.0;
            assert!(mean.abs() < 1e-6, "token {r} mean {mean}");
        }
    }
}

#[test]
fn target_from_zero_adds_one_term() {
    let cfg = AuxConfig { data2vec_target_from_zero: true, ..AuxConfig::default() };
    assert_eq!(cfg.data2vec_terms(), 3);
    assert_eq!(AuxConfig::default().data2vec_terms(), 2);
    let too_many = AuxConfig { task: AuxTask::Data2vec, data2vec_top_k: 3, ..tiny_aux(AuxTask::Data2vec) };
    let (vit, store) = vit_f64(&tiny_vit(), 0);
    assert!(AuxModule::new(&too_many, Some(&vit), &store, &mut rng(0)).is_err());
    assert!(AuxModule::new(&tiny_aux(AuxTask::Mae), None, &store, &mut rng(0)).is_err());
}

fn smooth_l1_value(d: &[f64], beta: f64) -> f64 {
    let mut g = Graph::<f64>::new();
    let p = g.input(Tensor::new(&[1, d.len()], d.to_vec()).unwrap());
    let t = g.input(Tensor::zeros(&[1, d.len()]));
    let l = data2vec_loss(&mut g, p, t, beta).unwrap();
    g.value(l).item()
}

#[test]
fn smooth_l1_branches() {
    assert_eq!(smooth_l1_value(&[2.0], 2.0), 1.0);
    assert_eq!(smooth_l1_value(&[-2.0], 2.0), 1.0);
    assert_eq!(smooth_l1_value(&[3.0], 2.0), 2.0);
    assert_eq!(smooth_l1_value(&[0.0], 2.0), 0.0);
    assert_eq!(smooth_l1_value(&[1.0], 2.0), 0.25);
    // both branch formulas meet at the knee
    let beta = 2.0f64;
    assert_eq!(0.5 * beta * beta / beta, beta - 0.5 * beta);
    let below = smooth_l1_value(&[beta - 1e-9], beta);
    let above = smooth_l1_value(&[beta + 1e-9], beta);
    assert!((below - 1.0).abs() < 2e-9 && (above - 1.0).abs() < 2e-9);
    // mean over elements
    assert_eq!(smooth_l1_value(&[2.0, 3.0, 0.0, -1.0], 2.0), (1.0 + 2.0 + 0.0 + 0.25) / 4.0);
}

#[test]
fn data2vec_loss_vanishes_only_at_the_target() {
    let mut r = rng(6);
    let t = rand_tensor(&mut r, &[5, 8], -2.0, 2.0);
    let mut g = Graph::<f64>::new();
    let tv = g.input(t.clone());
    let pv = g.input(t.clone());
    let l = data2vec_loss(&mut g, pv, tv, 2.0).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let mut moved = t.clone();
    moved.data_mut()[17] += 1e-3;
    let pv = g.input(moved);
    let l = data2vec_loss(&mut g, pv, tv, 2.0).unwrap();
    assert!(g.value(l).item() > 0.0);
}

#[test]
fn data2vec_objective_routes_no_gradient_into_the_momentum_copy() {
    let cfg = tiny_vit();
    let (vit, enc) = vit_f64(&cfg, 7);
    let mut r = rng(8);
    let aux_cfg = tiny_aux(AuxTask::Data2vec);
    let mut aux = AuxModule::new(&aux_cfg, Some(&vit), &enc, &mut r).unwrap();
    let AuxNet::Data2Vec(head) = aux.net.clone() else { unreachable!() };
    let mut momentum = aux.momentum_encoder.take().unwrap();
    jitter(&mut momentum, &mut r, 0.1);
    let images = random_images(&mut r, 2, cfg.in_channels, cfg.image_size);
    let masks = random_masks(&mut r, 0.5, cfg.num_patches(), 2);
    let mut g = Graph::new();
    let l = data2vec_objective(&mut g, &vit, Bind::trainable(&enc), &momentum, &head, Bind::trainable(&aux.heads), &images, &masks, &aux_cfg)
        .unwrap();
    let grads = g.backward(l);
    momentum.zero_grad();
    momentum.accumulate(&g, &grads);
    assert!(momentum.grads_all_zero());
    let mut enc = enc;
    enc.accumulate(&g, &grads);
    assert!(enc.grad_norm() > 0.0);
}

#[test]
fn data2vec_targets_do_not_collapse_during_training() {
    let cfg = tiny_vit();
    let (vit, mut enc) = vit_f64(&cfg, 9);
    let mut r = rng(10);
    let aux_cfg = AuxConfig { lr: 1e-2, ..tiny_aux(AuxTask::Data2vec) };
    let mut aux = AuxModule::new(&aux_cfg, Some(&vit), &enc, &mut r).unwrap();
    for step in 0..30 {
        let images = random_images(&mut r, 4, cfg.in_channels, cfg.image_size);
        aux.update(Some(&vit), &mut enc, AuxInput::Cropped(&images), &mut r).unwrap();
        let patches = patchify(&images, cfg.patch_size).unwrap();
        let mut g = Graph::new();
        let t = data2vec_target(&mut g, &vit, aux.momentum_encoder.as_ref().unwrap(), &patches, 4, 2).unwrap();
        let v = g.value(t.target);
        for row in 0..v.rows() {
            let x = v.row(row);
            let mu = x.iter().sum::<f64>() / x.len() as f64;
            let var = x.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / x.len() as f64;
            assert!(var > 1e-3, "step {step} token {row} variance {var}");
        }
    }
}

// --------------------------------------------------------------------- MAE

fn mae_setup(seed: u64) -> (VitConfig, Vit, ParamStore<f64>, AuxModule<f64>) {
    let cfg = tiny_vit();
    let (vit, enc) = vit_f64(&cfg, seed);
    let aux = AuxModule::new(&tiny_aux(AuxTask::Mae), Some(&vit), &enc, &mut rng(seed + 1)).unwrap();
    (cfg, vit, enc, aux)
}

#[test]
fn mae_sequence_lengths_and_output_shape() {
    let cfg = VitConfig::default();
    let mut enc = ParamStore::<f32>::new();
    let mut r = rng(0);
    let vit = Vit::new(&mut enc, &cfg, &mut r).unwrap();
    let aux = AuxModule::new(&AuxConfig { task: AuxTask::Mae, ..AuxConfig::default() }, Some(&vit), &enc, &mut r).unwrap();
    let AuxNet::Mae(dec) = &aux.net else { unreachable!() };
    let patches = Tensor::<f32>::full(&[49, cfg.patch_dim()], 0.5);
    let masks = vec![sample_mask(0.75, 49, &mut r).unwrap()];
    let mut g = Graph::new();
    let out = mae_forward(&mut g, &vit, Bind::frozen(&enc), dec, Bind::frozen(&aux.heads), &patches, &masks).unwrap();
    assert_eq!(g.shape(out.encoder_tokens), &[12, 128]);
    assert_eq!(g.shape(out.pred), &[49, 1296]);
    assert_eq!(aux.heads.get(dec.mask_token).shape(), &[1, 64]);
    assert_eq!(aux.heads.get(dec.pos_embed).shape(), &[49, 64]);
    assert!(aux.momentum_encoder.is_none());
}

#[test]
fn mae_loss_reference_values() {
    let mut r = rng(11);
    let patches = rand_tensor(&mut r, &[6, 12], 0.0, 1.0);
    let masks = vec![MaskSet::new(vec![0, 2], 3).unwrap(), MaskSet::new(vec![1], 3).unwrap()];
    let masked = [0usize, 2, 4];
    let norm = per_patch_normalize(patches.data(), 12);
    // exact at masked rows, garbage elsewhere
    let pred = Tensor::from_fn(&[6, 12], |i| if masked.contains(&(i / 12)) { norm[i] } else { 1e6 });
    let mut g = Graph::<f64>::new();
    let p = g.input(pred);
    let l = mae_loss(&mut g, p, &patches, &masks).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let p = g.input(Tensor::zeros(&[6, 12]));
    let l = mae_loss(&mut g, p, &patches, &masks).unwrap();
    let want = masked.iter().flat_map(|&m| norm[m * 12..(m + 1) * 12].iter()).map(|v| v * v).sum::<f64>() / 36.0;
    assert!((g.value(l).item() - want).abs() < 1e-12);
    assert!((want - 1.0).abs() < 1e-3);
}

#[test]
fn mae_loss_ignores_visible_predictions() {
    let mut r = rng(12);
    let patches = rand_tensor(&mut r, &[8, 12], 0.0, 1.0);
    let masks = vec![MaskSet::new(vec![1, 3], 4).unwrap(), MaskSet::new(vec![0], 4).unwrap()];
    let pred = rand_tensor(&mut r, &[8, 12], -1.0, 1.0);
    let mut g = Graph::<f64>::new();
    let p = g.variable(pred.clone());
    let l = mae_loss(&mut g, p, &patches, &masks).unwrap();
    let grads = g.backward(l);
    let grad = grads.get(p).unwrap();
    for row in 0..8 {
        let masked = [1usize, 3, 4].contains(&row);
        let any = grad.row(row).iter().any(|&v| v != 0.0);
        assert_eq!(any, masked, "row {row}");
    }
    let base = g.value(l).item();
    let mut flipped = pred.clone();
    flipped.data_mut()[2 * 12..3 * 12].iter_mut().for_each(|v| *v = -*v);
    let mut g = Graph::<f64>::new();
    let p = g.input(flipped);
    let l = mae_loss(&mut g, p, &patches, &masks).unwrap();
    assert_eq!(g.value(l).item(), base);
}

#[test]
fn masked_pixels_reach_the_mae_loss_only_through_targets() {
    let (cfg, vit, enc, aux) = mae_setup(13);
    let AuxNet::Mae(dec) = &aux.net else { unreachable!() };
    let mut r = rng(14);
    let images = random_images(&mut r, 2, cfg.in_channels, cfg.image_size);
    let masks = random_masks(&mut r, 0.5, cfg.num_patches(), 2);
    let mut patches = patchify(&images, cfg.patch_size).unwrap();
    let run = |patches: &Tensor<f64>| {
        let mut g = Graph::new();
        let out = mae_forward(&mut g, &vit, Bind::frozen(&enc), dec, Bind::frozen(&aux.heads), patches, &masks).unwrap();
        let acts: Vec<Vec<f64>> = out.encoder_activations.iter().map(|&a| g.value(a).data().to_vec()).collect();
        let pred = g.value(out.pred).data().to_vec();
        let loss = mae_loss(&mut g, out.pred, patches, &masks).unwrap();
        (acts, pred, g.value(loss).item())
    };
    let (acts, pred, loss) = run(&patches);
    let dim = cfg.patch_dim();
    for (b, m) in masks.iter().enumerate() {
        for &i in &m.masked {
            let row = (b * cfg.num_patches() + i) * dim;
            patches.data_mut()[row..row + dim].iter_mut().enumerate().for_each(|(k, v)| *v = (k % 3) as f64);
        }
    }
    let (acts2, pred2, loss2) = run(&patches);
    assert_eq!(acts, acts2);
    assert_eq!(pred, pred2);
    assert_ne!(loss, loss2);
}

#[test]
fn mae_update_trains_encoder_and_decoder() {
    let (cfg, vit, mut enc, mut aux) = mae_setup(15);
    let mut r = rng(16);
    let images = random_images(&mut r, 2, cfg.in_channels, cfg.image_size);
    let mut g = Graph::new();
    let l = aux.objective(&mut g, &vit, &enc, AuxInput::Cropped(&images), &mut r).unwrap().unwrap();
    let grads = g.backward(l);
    enc.accumulate(&g, &grads);
    aux.heads.accumulate(&g, &grads);
    assert!(enc.grad_norm() > 0.0);
    assert!(aux.heads.grad_norm() > 0.0);
    enc.zero_grad();
    aux.heads.zero_grad();
    drop(grads);

    let (enc0, heads0) = (enc.fingerprint(), aux.heads.fingerprint());
    let stats = aux.update(Some(&vit), &mut enc, AuxInput::Cropped(&images), &mut r).unwrap();
    assert!(stats.loss > 0.0 && stats.encoder_grad_norm > 0.0);
    assert_ne!(enc.fingerprint(), enc0);
    assert_ne!(aux.heads.fingerprint(), heads0);
    assert_eq!(aux.updates, 1);
}

#[test]
fn task_none_leaves_the_encoder_untouched() {
    let cfg = tiny_vit();
    let (vit, mut enc) = vit_f64(&cfg, 17);
    let mut r = rng(18);
    let mut aux = AuxModule::new(&tiny_aux(AuxTask::None), Some(&vit), &enc, &mut r).unwrap();
    let before = enc.fingerprint();
    let images = random_images(&mut r, 2, cfg.in_channels, cfg.image_size);
    let stats = aux.update(Some(&vit), &mut enc, AuxInput::Cropped(&images), &mut r).unwrap();
    assert_eq!(stats.loss, 0.0);
    assert_eq!(enc.fingerprint(), before);
    assert_eq!(aux.heads.num_scalars(), 0);
    assert_eq!(aux.updates, 0);
}

#[test]
fn wrong_input_kind_is_rejected() {
    let (cfg, vit, mut enc, mut aux) = mae_setup(19);
    let images = random_images(&mut rng(0), 2, cfg.in_channels, cfg.image_size);
    assert!(aux.update(Some(&vit), &mut enc, AuxInput::Pair(&images, &images), &mut rng(0)).is_err());
}

// ------------------------------------------------------------- contrastive

fn nce(q: &Tensor<f64>, k: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    let mut g = Graph::new();
    let (q, k, w) = (g.input(q.clone()), g.input(k.clone()), g.input(w.clone()));
    let l = info_nce(&mut g, q, k, w).unwrap();
    g.value(l).item()
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

#[test]
fn uniform_logits_give_log_batch() {
    let mut r = rng(20);
    let q = Tensor::zeros(&[128, 16]);
    let k = rand_tensor(&mut r, &[128, 16], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[16, 16], -1.0, 1.0);
    assert!((nce(&q, &k, &w) - 128f64.ln()).abs() < 1e-9);
}

#[test]
fn two_sample_identity_logits() {
    let eye = Tensor::from_fn(&[2, 2], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
    let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    assert!((nce(&eye, &eye, &eye) - want).abs() < 1e-15);
    assert!((want - 0.3133).abs() < 5e-5);
}

#[test]
fn separation_drives_the_loss_to_zero() {
    let eye = Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
    let mut last = f64::INFINITY;
    for s in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0] {
        let w = eye.map(|v| v * s);
        let l = nce(&eye, &eye, &w);
        assert!(l < last, "loss {l} at scale {s} did not drop");
        last = l;
    }
    assert!(last < 1e-20);
}

#[test]
fn row_shifted_logits_leave_the_loss_unchanged() {
    let mut r = rng(21);
    let (b, d) = (6, 5);
    let q = rand_tensor(&mut r, &[b, d], -1.0, 1.0);
    let k = rand_tensor(&mut r, &[b, d], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[d, d], -1.0, 1.0);
    let shift = rand_tensor(&mut r, &[b], -5.0, 5.0);
    // an extra coordinate adds shift[i] to every logit of row i
    let q2 = Tensor::from_fn(&[b, d + 1], |i| if i % (d + 1) == d { shift.data()[i / (d + 1)] } else { q.row(i / (d + 1))[i % (d + 1)] });
    let k2 = Tensor::from_fn(&[b, d + 1], |i| if i % (d + 1) == d { 1.0 } else { k.row(i / (d + 1))[i % (d + 1)] });
    let w2 = Tensor::from_fn(&[d + 1, d + 1], |i| {
        let (a, c) = (i / (d + 1), i % (d + 1));
        match (a == d, c == d) {
            (true, true) => 1.0,
            (false, false) => w.row(a)[c],
            _ => 0.0,
        }
    });
    assert!((nce(&q, &k, &w) - nce(&q2, &k2, &w2)).abs() < 1e-12);
}

proptest! {
    #[test]
    fn info_nce_matches_the_brute_force_oracle(b in 1usize..=8, d in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let q = rand_tensor(&mut r, &[b, d], -2.0, 2.0);
        let k = rand_tensor(&mut r, &[b, d], -2.0, 2.0);
        let w = rand_tensor(&mut r, &[d, d], -2.0, 2.0);
        let want = brute_force_infonce(&rows(&q), &rows(&k), &rows(&w)).unwrap();
        prop_assert!((nce(&q, &k, &w) - want).abs() < 1e-10);
    }
}

#[test]
fn keys_carry_no_gradient_and_momentum_heads_follow() {
    let cfg = tiny_vit();
    let (vit, mut enc) = vit_f64(&cfg, 22);
    let mut r = rng(23);
    let aux_cfg = tiny_aux(AuxTask::Contrastive);
    let mut aux = AuxModule::new(&aux_cfg, Some(&vit), &enc, &mut r).unwrap();
    let q = random_images(&mut r, 3, cfg.in_channels, cfg.image_size);
    let k = random_images(&mut r, 3, cfg.in_channels, cfg.image_size);
    let mut g = Graph::new();
    let l = aux.objective(&mut g, &vit, &enc, AuxInput::Pair(&q, &k), &mut r).unwrap().unwrap();
    let grads = g.backward(l);
    let (me, mh) = (aux.momentum_encoder.as_mut().unwrap(), aux.momentum_heads.as_mut().unwrap());
    me.accumulate(&g, &grads);
    mh.accumulate(&g, &grads);
    assert!(me.grads_all_zero() && mh.grads_all_zero());
    drop(grads);

    let old_me = aux.momentum_encoder.as_ref().unwrap().flatten();
    let old_mh = aux.momentum_heads.as_ref().unwrap().flatten();
    aux.update(Some(&vit), &mut enc, AuxInput::Pair(&q, &k), &mut r).unwrap();
    for (shadow, old, src) in [
        (aux.momentum_encoder.as_ref().unwrap().flatten(), old_me, enc.flatten()),
        (aux.momentum_heads.as_ref().unwrap().flatten(), old_mh, aux.heads.flatten()),
    ] {
        for ((s, o), n) in shadow.iter().zip(&old).zip(&src) {
            assert!((s - (0.95 * o + 0.05 * n)).abs() < 1e-15);
        }
    }
}

#[test]
fn contrastive_views_are_independent_crops() {
    let channels = 3;
    let stack_len = channels * INPUT_SIZE * INPUT_SIZE;
    let stacks: Vec<u8> = (0..2 * stack_len).map(|i| ((i * 37 + i / 100) % 251) as u8).collect();
    let mut r = rng(24);
    let mut differ = 0;
    for _ in 0..20 {
        let (a, b) = contrastive_pair::<f64, _>(&stacks, 2, channels, &mut r).unwrap();
        assert_eq!(a.shape(), &[2, channels, CROP_SIZE, CROP_SIZE]);
        for s in 0..2 {
            let src = &stacks[s * stack_len..(s + 1) * stack_len];
            let find = |view: &Tensor<f64>| {
                let got: Vec<u8> = view.data()[s * channels * CROP_SIZE * CROP_SIZE..(s + 1) * channels * CROP_SIZE * CROP_SIZE]
                    .iter()
                    .map(|v| (v * 255.0).round() as u8)
                    .collect();
                (0..=MAX_OFFSET)
                    .flat_map(|y| (0..=MAX_OFFSET).map(move |x| (y, x)))
                    .find(|&o| pixrl::augment::crop_at(src, channels, o).unwrap() == got)
                    .expect("view is a crop of its source")
            };
            differ += usize::from(find(&a) != find(&b));
        }
    }
    assert!(differ > 30);
}

#[test]
fn module_state_round_trips_through_a_container() {
    // checkpoints hold f32, the training precision
    let cfg = tiny_vit();
    let mut enc = ParamStore::<f32>::new();
    let mut r = rng(26);
    let vit = Vit::new(&mut enc, &cfg, &mut r).unwrap();
    let aux_cfg = tiny_aux(AuxTask::Contrastive);
    let mut aux = AuxModule::new(&aux_cfg, Some(&vit), &enc, &mut r).unwrap();
    let q64 = random_images(&mut r, 3, cfg.in_channels, cfg.image_size);
    let q = Tensor::<f32>::new(q64.shape(), q64.data().iter().map(|&v| v as f32).collect()).unwrap();
    aux.update(Some(&vit), &mut enc, AuxInput::Pair(&q, &q), &mut r).unwrap();
    let mut c = Container::new();
    aux.export(&enc, &mut c);
    let mut fresh = AuxModule::new(&aux_cfg, Some(&vit), &enc, &mut rng(99)).unwrap();
    fresh.import(&enc, &c).unwrap();
    assert_eq!(fresh.heads.fingerprint(), aux.heads.fingerprint());
    assert_eq!(
        fresh.momentum_encoder.as_ref().unwrap().fingerprint(),
        aux.momentum_encoder.as_ref().unwrap().fingerprint()
    );
    assert_eq!(fresh.updates, 1);
    let (mut e1, mut e2) = (enc.duplicate(), enc.duplicate());
    let (mut a1, mut a2) = (aux, fresh);
    let s1 = a1.update(Some(&vit), &mut e1, AuxInput::Pair(&q, &q), &mut rng(1)).unwrap();
    let s2 = a2.update(Some(&vit), &mut e2, AuxInput::Pair(&q, &q), &mut rng(1)).unwrap();
    assert_eq!(s1, s2);
    assert_eq!(e1.fingerprint(), e2.fingerprint());
}
