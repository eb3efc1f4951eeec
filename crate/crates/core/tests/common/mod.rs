#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sat_core::model::{random_tensor, ForwardMode, SatConfig, SatModel};
use sat_core::objective::{total_loss, Labels, LossWeights};
use sat_core::params::Bound;
use sat_core::tensor::{Tape, Tensor, Var};
use sat_core::Result;

pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst relative error between backprop and central differences of the
/// scalar `f` over every entry of every input.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> =
        vars.iter().map(|&v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).numel()], <[f64]>::to_vec)).collect();

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &g) in grads.iter().enumerate() {
            let base = inputs[i].data()[j];
            probe[i].data_mut()[j] = base + FD_STEP;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = base - FD_STEP;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = base;
            worst = worst.max(rel_err(g, (up - down) / (2.0 * FD_STEP)));
        }
    }
    Ok(worst)
}

/// Σ w ⊙ x for a fixed random w: turns any tensor into a scalar with
/// non-degenerate gradients.
pub fn project(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let w = random_tensor::<f64, _>(tape.shape(x), 1.0, &mut rng(seed));
    let w = tape.constant(w);
    let y = tape.mul(x, w)?;
    tape.sum_all(y)
}

pub fn tiny_config(token_replay: bool, rab: bool) -> SatConfig {
    SatConfig {
        num_regions: 3,
        embed_dim: 8,
        depth: 2,
        num_heads: 2,
        class_counts: vec![3, 4, 2],
        token_replay,
        rab,
        image_size: 8,
        channel_widths: vec![2, 3],
        ..SatConfig::default()
    }
}

/// A model whose parameters are moved well away from initialization so that
/// every gradient, including the bias scalars', is exercised.
pub fn scrambled_model(cfg: SatConfig, seed: u64) -> SatModel<f64> {
    let mut model = SatModel::<f64>::new(cfg, seed).expect("valid config");
    let mut r = rng(seed ^ 0xabcd);
    for p in model.params.iter_mut() {
        let noise = random_tensor::<f64, _>(p.value.shape(), 0.3, &mut r);
        for (w, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
            *w += n;
        }
    }
    model
}

pub fn random_labels(batch: usize, class_counts: &[usize], seed: u64) -> Labels {
    use rand::Rng;
    let mut r = rng(seed);
    let rows: Vec<Vec<u32>> =
        (0..batch).map(|_| class_counts.iter().map(|&k| r.random_range(1..=k as u32)).collect()).collect();
    Labels::from_rows(&rows).expect("labels in range")
}

/// Worst relative gradient error of the total loss over every parameter of
/// a full forward pass.
pub fn model_gradcheck(cfg: SatConfig, seed: u64, batch: usize) -> Result<f64> {
    let model = scrambled_model(cfg.clone(), seed);
    let images = random_tensor::<f64, _>(
        &[batch, cfg.num_regions, cfg.in_channels, cfg.image_size, cfg.image_size],
        1.0,
        &mut rng(seed + 1),
    );
    let labels = random_labels(batch, &cfg.class_counts, seed + 2);
    let weights = LossWeights::default();
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let inputs: Vec<Tensor<f64>> = model.params.iter().map(|p| p.value.clone()).collect();
    gradcheck(&inputs, |tape, vars| {
        let bound = Bound::from_vars(names.iter().cloned().zip(vars.iter().copied()));
        let input = tape.constant(images.clone());
        let out = model.forward(tape, &bound, input, ForwardMode::Eval)?;
        Ok(total_loss(tape, &out.logits, &labels, &weights)?.0)
    })
}

/// Copies every parameter `dst` shares with `src` by name.
pub fn copy_shared_params(src: &SatModel<f64>, dst: &mut SatModel<f64>) {
    for p in dst.params.iter_mut() {
        if let Some(v) = src.params.get(&p.name) {
            p.value = v.clone();
        }
    }
}

pub struct RabProbe {
    /// Largest biased-minus-unbiased change away from the (i, R+i) entries.
    pub off_target: f64,
    /// Largest deviation of the change at (i, R+i) from d_i.
    pub on_target: f64,
}

/// Runs every layer twice on the same input, with and without the bias, and
/// compares pre-softmax logits; the sequence then advances along the biased
/// path exactly as the model's own forward does.
pub fn rab_probe(model: &SatModel<f64>, batch: usize, seed: u64) -> Result<RabProbe> {
    let cfg = model.config().clone();
    let (r, d, heads) = (cfg.num_regions, cfg.embed_dim, cfg.num_heads);
    let n = 2 * r;
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let z0 = tape.constant(random_tensor(&[batch, r, d], 1.0, &mut rng(seed)));
    let cls = tape.tile_leading(bound.var("cls_tokens")?, batch)?;
    let mut x = tape.concat(&[cls, z0], 1)?;
    let zeros = tape.constant(Tensor::zeros(&[batch, r, d]));
    let replay = tape.concat(&[z0, zeros], 1)?;
    let b = model.params.get("rab_scalars").expect("bias scalars").clone();
    let mut probe = RabProbe { off_target: 0.0, on_target: 0.0 };
    for l in 0..cfg.depth {
        let bias = model.layer_bias(&mut tape, &bound, l)?;
        let (biased, att_b) = model.encoder_layer(&mut tape, &bound, l, x, Some(bias), None)?;
        let (_, att_u) = model.encoder_layer(&mut tape, &bound, l, x, None, None)?;
        let pb = tape.value(att_b.pre_softmax).data().to_vec();
        let pu = tape.value(att_u.pre_softmax).data().to_vec();
        for bh in 0..batch * heads {
            for i in 0..n {
                for j in 0..n {
                    let idx = (bh * n + i) * n + j;
                    let diff = pb[idx] - pu[idx];
                    if i < r && j == r + i {
                        let di = sat_core::model::rab_value(b.at(&[l, i]));
                        probe.on_target = probe.on_target.max((diff - di).abs());
                    } else {
                        probe.off_target = probe.off_target.max(diff.abs());
                    }
                }
            }
        }
        x = if cfg.token_replay { tape.add(biased, replay)? } else { biased };
    }
    Ok(probe)
}

/// Largest pre-softmax difference between a bias-enabled model with every
/// scalar at -1 and the same weights without the bias.
pub fn neutral_bias_gap(cfg: SatConfig, seed: u64) -> Result<f64> {
    let mut with = scrambled_model(SatConfig { rab: true, ..cfg.clone() }, seed);
    with.params.get_mut("rab_scalars").expect("bias scalars").data_mut().fill(-1.0);
    let mut without = SatModel::<f64>::new(SatConfig { rab: false, ..cfg.clone() }, 0)?;
    copy_shared_params(&with, &mut without);
    let images = random_tensor::<f64, _>(
        &[2, cfg.num_regions, cfg.in_channels, cfg.image_size, cfg.image_size],
        1.0,
        &mut rng(seed + 7),
    );
    let (ta, _, oa) = with.run(&images, ForwardMode::Eval)?;
    let (tb, _, ob) = without.run(&images, ForwardMode::Eval)?;
    let mut gap = 0.0f64;
    for (a, b) in oa.attention.iter().zip(&ob.attention) {
        for (x, y) in ta.value(a.pre_softmax).data().iter().zip(tb.value(b.pre_softmax).data()) {
            gap = gap.max((x - y).abs());
        }
    }
    Ok(gap)
}

/// Plain multi-view multi-task ViT forward built from the public layer
/// pieces: CLS tokens, regional tokens, unbiased layers, dense heads.
pub fn vanilla_forward<T: sat_core::tensor::Real>(
    model: &SatModel<T>,
    images: &Tensor<T>,
) -> Result<(Tape<T>, Vec<Var>)> {
    let cfg = model.config();
    let (r, d) = (cfg.num_regions, cfg.embed_dim);
    let batch = images.shape()[0];
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let input = tape.constant(images.clone());
    let embedder = sat_core::embedder::RegionEmbedder::new(cfg.embedder_config(), r, cfg.shared_embedder)?;
    let z0 = embedder.embed_batch(&mut tape, &bound, input)?;
    let cls = tape.tile_leading(bound.var("cls_tokens")?, batch)?;
    let mut x = tape.concat(&[cls, z0], 1)?;
    for l in 0..cfg.depth {
        x = model.encoder_layer(&mut tape, &bound, l, x, None, None)?.0;
    }
    let cls_features = tape.narrow(x, 1, 0, r)?;
    let mut logits = Vec::new();
    for region in 0..r {
        let tok = tape.narrow(cls_features, 1, region, 1)?;
        let tok = tape.reshape(tok, &[batch, d])?;
        let h = tape.matmul(tok, bound.var(&format!("heads.{region}.weight"))?)?;
        logits.push(tape.add(h, bound.var(&format!("heads.{region}.bias"))?)?);
    }
    Ok((tape, logits))
}

pub struct Degeneracy {
    pub forwards: usize,
    /// Forwards whose logits matched bitwise across all three paths.
    pub identical: usize,
    /// Every forward recorded the same number of graph nodes on all paths.
    pub same_graph: bool,
}

/// The `mvmt_vit` variant, the full model with both switches off, and the
/// vanilla reference, compared bitwise over `forwards` random inputs.
pub fn degeneracy(forwards: usize, seed: u64) -> Result<Degeneracy> {
    use sat_core::config::{RunConfig, Variant};
    let base = SatConfig { image_size: 16, channel_widths: vec![4, 8], ..SatConfig::default() };
    let vit_cfg = RunConfig { model: base.clone(), variant: Variant::MvmtVit, ..RunConfig::default() }.resolved_model();
    let off_cfg = SatConfig { token_replay: false, rab: false, ..base };
    let vit = SatModel::<f32>::new(vit_cfg, seed)?;
    let off = SatModel::<f32>::new(off_cfg, seed)?;
    let mut r = rng(seed + 1);
    let mut out = Degeneracy { forwards, identical: 0, same_graph: true };
    for _ in 0..forwards {
        let images = random_tensor::<f32, _>(&[2, 5, 1, 16, 16], 1.0, &mut r);
        let (ta, _, oa) = vit.run(&images, ForwardMode::Eval)?;
        let (tb, _, ob) = off.run(&images, ForwardMode::Eval)?;
        let (tc, lc) = vanilla_forward(&vit, &images)?;
        out.same_graph &= ta.len() == tb.len() && tb.len() == tc.len();
        let bits = |t: &Tape<f32>, v: &[Var]| -> Vec<u32> {
            v.iter().flat_map(|&x| t.value(x).data().iter().map(|f| f.to_bits()).collect::<Vec<_>>()).collect()
        };
        let (a, b, c) = (bits(&ta, &oa.logits), bits(&tb, &ob.logits), bits(&tc, &lc));
        if a == b && b == c {
            out.identical += 1;
        }
    }
    Ok(out)
}

pub struct LossOracleGap {
    pub mean: f64,
    pub variance: f64,
    pub ce: f64,
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Worst absolute gap between the tape losses and direct summation, over
/// `trials` random problems (random R, K_r, batch, logit scale).
pub fn loss_oracle_gap(trials: usize, seed: u64) -> Result<LossOracleGap> {
    use rand::Rng;
    use sat_core::objective::{ce_loss, mean_loss, variance_loss};
    let mut r = rng(seed);
    let mut gap = LossOracleGap { mean: 0.0, variance: 0.0, ce: 0.0 };
    for _ in 0..trials {
        let regions = r.random_range(1..=5usize);
        let batch = r.random_range(1..=4usize);
        let ks: Vec<usize> = (0..regions).map(|_| r.random_range(2..=9)).collect();
        let scale = r.random_range(0.1..6.0);
        let logits: Vec<Vec<f64>> =
            ks.iter().map(|&k| (0..batch * k).map(|_| r.random_range(-1.0..1.0) * scale).collect()).collect();
        let labels = random_labels(batch, &ks, r.random());

        let (mut want_mean, mut want_var, mut want_ce) = (0.0, 0.0, 0.0);
        for (ri, &k) in ks.iter().enumerate() {
            let (mut m, mut v, mut c) = (0.0, 0.0, 0.0);
            for b in 0..batch {
                let p = softmax(&logits[ri][b * k..(b + 1) * k]);
                let mu: f64 = p.iter().enumerate().map(|(i, pi)| (i + 1) as f64 * pi).sum();
                let y = labels.get(b, ri) as f64;
                m += (mu - y).powi(2);
                v += p.iter().enumerate().map(|(i, pi)| pi * ((i + 1) as f64 - mu).powi(2)).sum::<f64>();
                c += -p[labels.get(b, ri) as usize - 1].ln();
            }
            want_mean += m / batch as f64;
            want_var += v / batch as f64;
            want_ce += c / batch as f64;
        }
        let rf = regions as f64;

        let mut tape = Tape::<f64>::new();
        let zs: Vec<Var> = ks
            .iter()
            .zip(&logits)
            .map(|(&k, z)| tape.constant(Tensor::new(vec![batch, k], z.clone()).expect("shape")))
            .collect();
        let probs: Vec<Var> = ks
            .iter()
            .zip(&logits)
            .map(|(&k, z)| {
                let p: Vec<f64> = z.chunks(k).flat_map(softmax).collect();
                tape.constant(Tensor::new(vec![batch, k], p).expect("shape"))
            })
            .collect();
        let m = mean_loss(&mut tape, &probs, &labels)?;
        let v = variance_loss(&mut tape, &probs)?;
        let c = ce_loss(&mut tape, &zs, &labels)?;
        let got = |v: Var| tape.value(v).data()[0];
        gap.mean = gap.mean.max((got(m) - want_mean / rf).abs());
        gap.variance = gap.variance.max((got(v) - want_var / rf).abs());
        gap.ce = gap.ce.max((got(c) - want_ce / rf).abs());
    }
    Ok(gap)
}

/// f(w) = w² from w = 1 with ρ = 0.5, lr = 0.1 and no momentum; returns w'.
pub fn sam_quadratic_step() -> Result<f64> {
    use sat_core::objective::LossBreakdown;
    use sat_core::optim::{sam_step, MomentumState, OptimConfig};
    let mut store = sat_core::params::ParamStore::new();
    store.insert("w", Tensor::scalar(1.0f64))?;
    let mut state = MomentumState::new(&store);
    let cfg = OptimConfig { rho: 0.5, momentum: 0.0, ..OptimConfig::default() };
    sam_step(&mut store, &mut state, 0.1, &cfg, |p| {
        let w = p.get("w").expect("w").data()[0];
        Ok((LossBreakdown { total: w * w, ..Default::default() }, vec![vec![2.0 * w]]))
    })?;
    Ok(store.get("w").expect("w").data()[0])
}

/// Training batch for a small f32 model.
pub fn model_problem(seed: u64) -> (SatModel<f32>, Tensor<f32>, Labels) {
    let cfg = SatConfig { embed_dim: 8, image_size: 8, channel_widths: vec![2, 4], ..SatConfig::default() };
    let model = SatModel::<f32>::new(cfg.clone(), seed).expect("valid config");
    let images = random_tensor::<f32, _>(&[4, 5, 1, 8, 8], 1.0, &mut rng(seed + 1));
    let labels = random_labels(4, &cfg.class_counts, seed + 2);
    (model, images, labels)
}

/// Runs `steps` updates with SAM at ρ = 0 and with plain momentum SGD from
/// the same start; true when every parameter bit agrees afterwards.
pub fn sam_without_radius_is_momentum_sgd(steps: usize, seed: u64) -> Result<bool> {
    use sat_core::optim::{sam_step, sgd_step, MomentumState, OptimConfig};
    use sat_core::train::loss_and_grads;
    let (model, images, labels) = model_problem(seed);
    let weights = LossWeights::default();
    let cfg = OptimConfig { rho: 0.0, ..OptimConfig::default() };
    let compute = |p: &sat_core::params::ParamStore<f32>| {
        loss_and_grads(&model, p, &images, &labels, &weights, ForwardMode::Eval).map(|(l, g, _)| (l, g))
    };
    let (mut pa, mut pb) = (model.params.clone(), model.params.clone());
    let (mut sa, mut sb) = (MomentumState::new(&pa), MomentumState::new(&pb));
    for _ in 0..steps {
        sam_step(&mut pa, &mut sa, 0.01, &cfg, compute)?;
        let (_, g) = compute(&pb)?;
        sgd_step(&mut pb, &mut sb, &g, 0.01, cfg.momentum)?;
    }
    let bits = |p: &sat_core::params::ParamStore<f32>| -> Vec<u32> {
        p.iter().flat_map(|x| x.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
    };
    Ok(bits(&pa) == bits(&pb) && sa == sb)
}

pub struct LabelFidelity {
    pub min_pearson: f64,
    /// (region, class) pairs that never occur.
    pub missing_classes: Vec<(usize, u32)>,
}

pub fn label_fidelity(cfg: &sat_core::synth::SynthConfig) -> Result<LabelFidelity> {
    use sat_core::synth::{generate, label_correlations, Correlation};
    let ds = generate(cfg)?;
    let corr = label_correlations(&ds.samples, Correlation::Pearson);
    let mut min_pearson = f64::INFINITY;
    for (i, row) in corr.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if i != j {
                min_pearson = min_pearson.min(c);
            }
        }
    }
    let mut missing = Vec::new();
    for (r, &k) in cfg.class_counts.iter().enumerate() {
        for class in 1..=k as u32 {
            if !ds.samples.iter().any(|s| s.labels[r] == class) {
                missing.push((r, class));
            }
        }
    }
    Ok(LabelFidelity { min_pearson, missing_classes: missing })
}

/// Every file under `dir`, by name, with its bytes.
pub fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .expect("readable dir")
        .map(|e| {
            let e = e.expect("entry");
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).expect("readable file"))
        })
        .collect();
    out.sort();
    out
}
