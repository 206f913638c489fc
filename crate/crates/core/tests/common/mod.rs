//! Shared checks for the acceptance runner and the per-criterion tests.
//! Every check returns a one-line summary on success and the reason on failure.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unicon::backbone::{BackboneSpec, Batch, ConditioningConfig, ConditioningMode, EncoderKind, ModelConfig};
use unicon::conditioning::{film_apply, ConSA, ConSAConfig, ConditionContext, ConditionEmbedder, FilmGenerator};
use unicon::data::VolumeDims;
use unicon::hdsc::dense_coords;
use unicon::nn::{Forward, ParamStore};
use unicon::objectives::{batch_loss, ce_loss, dice_loss, segmentation_loss, LossConfig, CE_EPS};
use unicon::phantom::PhantomParams;
use unicon::plane::Plane;
use unicon::sampling::{relative_center, CropBox, CropSample, RelCenter};

pub type Check = std::result::Result<String, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// finite differences

/// Step for central differences in f64.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so gradients that are zero up to
/// rounding do not blow the ratio up.
pub const REL_FLOOR: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn scalar(t: &Tensor) -> std::result::Result<f64, String> {
    t.to_dtype(DType::F64).and_then(|t| t.to_scalar::<f64>()).map_err(err)
}

/// Compares backprop gradients of `f` against central differences for up to
/// `per_tensor` randomly chosen entries of every variable. Returns the worst
/// relative error and the number of entries checked.
pub fn fd_check(
    vars: &[(String, Var)],
    f: &dyn Fn() -> unicon::Result<Tensor>,
    per_tensor: usize,
    seed: u64,
) -> std::result::Result<(f64, usize, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let loss = f().map_err(err)?;
    let grads = loss.backward().map_err(err)?;
    let mut worst = (0.0, String::new());
    let mut checked = 0;
    for (name, var) in vars {
        let shape = var.dims().to_vec();
        let base: Vec<f64> = var.flatten_all().and_then(|t| t.to_vec1()).map_err(err)?;
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().and_then(|t| t.to_vec1()).map_err(err)?,
            None => vec![0.0; base.len()],
        };
        let idx: Vec<usize> = if base.len() <= per_tensor {
            (0..base.len()).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..base.len())).collect()
        };
        for i in idx {
            let eval_at = |v: f64| -> std::result::Result<f64, String> {
                let mut vals = base.clone();
                vals[i] = v;
                var.set(&Tensor::from_vec(vals, shape.as_slice(), &Device::Cpu).map_err(err)?)
                    .map_err(err)?;
                scalar(&f().map_err(err)?)
            };
            let up = eval_at(base[i] + FD_STEP)?;
            let down = eval_at(base[i] - FD_STEP)?;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let e = rel_err(analytic[i], numeric);
            if e > worst.0 {
                worst = (e, format!("{name}[{i}] analytic {:.6e} numeric {numeric:.6e}", analytic[i]));
            }
            checked += 1;
        }
        var.set(&Tensor::from_vec(base, shape.as_slice(), &Device::Cpu).map_err(err)?)
            .map_err(err)?;
    }
    Ok((worst.0, checked, worst.1))
}

fn store_vars(store: &ParamStore, keep: impl Fn(&str) -> bool) -> Vec<(String, Var)> {
    store
        .vars()
        .iter()
        .filter(|(k, _)| keep(k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect()
}

fn random_var(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> std::result::Result<Var, String> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Var::from_vec(data, shape, &Device::Cpu).map_err(err)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> std::result::Result<Tensor, String> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, shape, &Device::Cpu).map_err(err)
}

fn binary_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> std::result::Result<Tensor, String> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect();
    Tensor::from_vec(data, shape, &Device::Cpu).map_err(err)
}

// Contract with a fixed random weight tensor so every output entry matters.
fn project(out: &Tensor, weights: &Tensor) -> unicon::Result<Tensor> {
    Ok(out.mul(weights)?.mean_all()?)
}

const C: usize = 4;
const HW: usize = 8;
const HID: usize = 8;
const HEADS: usize = 2;
const B: usize = 2;

fn centers(rng: &mut ChaCha8Rng, n: usize) -> Vec<RelCenter> {
    (0..n)
        .map(|_| RelCenter::new(rng.random(), rng.random(), rng.random()))
        .collect()
}

fn grad_consa(seed: u64) -> std::result::Result<(f64, usize, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(seed, DType::F64);
    let emb = ConditionEmbedder::new(&mut store, "emb", 4, HID, true).map_err(err)?;
    let cfg = ConSAConfig {
        hid_dim: HID,
        heads: HEADS,
        dropout: 0.0,
        ..ConSAConfig::new(C)
    };
    let consa = ConSA::new(&mut store, "consa", cfg).map_err(err)?;
    let features = random_var(&mut rng, &[B, C, HW, HW], -1.0, 1.0)?;
    let weights = random_tensor(&mut rng, &[B, C, HW, HW])?;
    let ages = [1, 3];
    let cs = centers(&mut rng, B);
    let mut vars = store_vars(&store, |_| true);
    vars.push(("features".into(), features.clone()));
    let f = || {
        let ctx = emb.context(&ages, &cs)?;
        project(&consa.forward(&features, &ctx, &mut Forward::eval())?, &weights)
    };
    fd_check(&vars, &f, 12, seed)
}

fn grad_embed_location(seed: u64) -> std::result::Result<(f64, usize, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(seed, DType::F64);
    let emb = ConditionEmbedder::new(&mut store, "emb", 4, HID, true).map_err(err)?;
    let input = random_var(&mut rng, &[3, 3], 0.0, 1.0)?;
    let weights = random_tensor(&mut rng, &[3, HID])?;
    let mut vars = store_vars(&store, |k| k.contains("loc_mlp"));
    vars.push(("centers".into(), input.clone()));
    let f = || project(&emb.embed_location(&input)?, &weights);
    fd_check(&vars, &f, 16, seed)
}

fn grad_film(seed: u64) -> std::result::Result<(f64, usize, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(seed, DType::F64);
    let gen = FilmGenerator::new(&mut store, "film", HID, C).map_err(err)?;
    let features = random_var(&mut rng, &[B, C, HW, HW], -1.0, 1.0)?;
    let age = random_var(&mut rng, &[B, HID], -1.0, 1.0)?;
    let loc = random_var(&mut rng, &[B, HID], -1.0, 1.0)?;
    let weights = random_tensor(&mut rng, &[B, C, HW, HW])?;
    let mut vars = store_vars(&store, |_| true);
    vars.push(("features".into(), features.clone()));
    vars.push(("age_vec".into(), age.clone()));
    vars.push(("loc_vec".into(), loc.clone()));
    let f = || {
        let ctx = ConditionContext {
            age_vec: age.as_tensor().clone(),
            loc_vec: Some(loc.as_tensor().clone()),
        };
        project(&film_apply(&features, &gen.params(&ctx)?)?, &weights)
    };
    fd_check(&vars, &f, 16, seed)
}

fn tiny_batch(rng: &mut ChaCha8Rng, n: usize, crop: usize, dims: VolumeDims) -> std::result::Result<Batch, String> {
    let samples: Vec<CropSample> = (0..n)
        .map(|i| {
            let top = rng.random_range(0..=dims.height - crop);
            let left = rng.random_range(0..=dims.width - crop);
            let bbox = CropBox::new(top, top + crop, left, left + crop, rng.random_range(0..dims.depth));
            CropSample {
                image: Plane::from_fn(crop, crop, |_, _| rng.random::<f32>()),
                mask: None,
                bbox,
                rel_center: relative_center(&bbox, dims).expect("valid box"),
                age_index: i % 4,
                dims,
            }
        })
        .collect();
    Batch::from_samples(&samples, DType::F64, &Device::Cpu).map_err(err)
}

fn grad_decoder(seed: u64, kind: EncoderKind) -> std::result::Result<(f64, usize, String), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut backbone = match kind {
        EncoderKind::CnnRes2 => BackboneSpec::res2(vec![C, 2 * C]),
        EncoderKind::CnnPlain => BackboneSpec::unet(vec![C, 2 * C]),
    };
    backbone.res2_scales = 2;
    backbone.norm_groups = 2;
    let mut cond = ConditioningConfig::new(ConditioningMode::HdscDecoder);
    cond.hid_dim = HID;
    cond.heads = HEADS;
    let model = ModelConfig {
        backbone,
        conditioning: cond,
        seed,
        dtype: DType::F64,
    }
    .build()
    .map_err(err)?;
    let batch = tiny_batch(&mut rng, B, HW, VolumeDims::new(6, 20, 24))?;
    let weights = random_tensor(&mut rng, &[B, 2, HW, HW])?;
    let vars = store_vars(model.store(), |k| k.starts_with("dec") || k.starts_with("up") || k.starts_with("head"));
    let f = || project(&model.forward(&batch, &mut Forward::eval())?, &weights);
    fd_check(&vars, &f, 10, seed)
}

fn grad_losses(seed: u64) -> std::result::Result<Vec<(&'static str, (f64, usize, String))>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 24;
    let truth = binary_tensor(&mut rng, &[n])?;
    let p = random_var(&mut rng, &[n], 0.05, 0.95)?;
    let p2 = random_var(&mut rng, &[n, 2], 0.05, 0.95)?;
    let vars = vec![("probs".to_string(), p.clone())];
    let vars2 = vec![("probs".to_string(), p2.clone())];
    let cfg = LossConfig {
        alpha: 0.3,
        ..LossConfig::default()
    };
    Ok(vec![
        ("dice_loss", fd_check(&vars, &|| dice_loss(&p, &truth, 1e-5), n, seed)?),
        ("ce_loss", fd_check(&vars2, &|| ce_loss(&p2, &truth), 2 * n, seed)?),
        (
            "segmentation_loss",
            fd_check(&vars2, &|| segmentation_loss(&p2, &truth, &cfg), 2 * n, seed)?,
        ),
    ])
}

/// Analytic vs central-difference gradients of every differentiable building block.
pub fn criterion_gradients() -> Check {
    let mut results: Vec<(&str, (f64, usize, String))> = Vec::new();
    for seed in [11, 12] {
        results.push(("consa_forward", grad_consa(seed)?));
        results.push(("embed_location", grad_embed_location(seed)?));
        results.push(("film_apply", grad_film(seed)?));
        results.push(("decoder+coords (res2)", grad_decoder(seed, EncoderKind::CnnRes2)?));
        results.push(("decoder+coords (plain)", grad_decoder(seed, EncoderKind::CnnPlain)?));
        results.extend(grad_losses(seed)?);
    }
    let total: usize = results.iter().map(|r| r.1 .1).sum();
    let (name, (worst, _, at)) = results
        .iter()
        .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
        .expect("non-empty");
    if *worst < GRAD_TOL {
        Ok(format!("{total} entries, max rel err {worst:.2e} ({name})"))
    } else {
        Err(format!("{name}: rel err {worst:.2e} at {at}"))
    }
}

// ---------------------------------------------------------------------------
// coordinates

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

pub fn criterion_coordinates() -> Check {
    // relative centers
    let big = VolumeDims::new(1600, 1000, 1500);
    let c = relative_center(&CropBox::new(372, 628, 622, 878, 800), big).map_err(err)?;
    if c != RelCenter::new(0.5, 0.5, 0.5) {
        return Err(format!("centered crop gave {c:?}"));
    }
    let c = relative_center(&CropBox::new(0, 256, 0, 256, 0), big).map_err(err)?;
    if !(close(c.x, 0.085_333_333_333_333_33, 1e-12) && close(c.y, 0.128, 1e-12) && c.z == 0.0) {
        return Err(format!("corner crop gave {c:?}"));
    }
    let c = relative_center(&CropBox::full(big, 400), big).map_err(err)?;
    if c != RelCenter::new(0.5, 0.5, 0.25) {
        return Err(format!("full-slice crop gave {c:?}"));
    }

    // worked dense-coordinate examples
    let d = VolumeDims::new(10, 8, 8);
    let g = dense_coords(&CropBox::new(0, 3, 2, 6, 5), d, (3, 4)).map_err(err)?;
    if g.i_plane.data()[..4] != [0.25, 0.375, 0.5, 0.625] || g.k_plane.data().iter().any(|&k| k != 0.5) {
        return Err("W=8, l=2, r=6 example does not reproduce".into());
    }
    let g = dense_coords(&CropBox::new(0, 3, 2, 6, 5), d, (3, 2)).map_err(err)?;
    if g.i_plane.data()[..2] != [0.25, 0.625] {
        return Err(format!("downsampled columns {:?}", &g.i_plane.data()[..2]));
    }

    // every box of an 8x8x4 volume, native resolution, against the matrices
    let (zd, hd, wd) = (4usize, 8usize, 8usize);
    let dims = VolumeDims::new(zd, hd, wd);
    let mut boxes = 0;
    let mut grids = 0;
    for z in 0..zd {
        for t in 0..hd {
            for b in t + 1..=hd {
                for l in 0..wd {
                    for r in l + 1..=wd {
                        let bbox = CropBox::new(t, b, l, r, z);
                        let (h, w) = (b - t, r - l);
                        let g = dense_coords(&bbox, dims, (h, w)).map_err(err)?;
                        for y in 0..h {
                            for x in 0..w {
                                let want = [(l + x) as f64 / wd as f64, (t + y) as f64 / hd as f64, z as f64 / zd as f64];
                                let got = [g.i_plane.get(y, x), g.j_plane.get(y, x), g.k_plane.get(y, x)];
                                if got != want {
                                    return Err(format!("box {bbox:?} at ({y},{x}): {got:?} != {want:?}"));
                                }
                            }
                        }
                        boxes += 1;
                        for res in [(1, 1), (2, 3), (5, 2), (8, 8)] {
                            let g = dense_coords(&bbox, dims, res).map_err(err)?;
                            let all = g.i_plane.data().iter().chain(g.j_plane.data()).chain(g.k_plane.data());
                            if let Some(v) = all.into_iter().find(|v| !(0.0..=1.0).contains(*v)) {
                                return Err(format!("value {v} outside [0,1] for {bbox:?} at {res:?}"));
                            }
                            grids += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(format!("{boxes} boxes exact at native resolution, {grids} resampled grids in [0,1]"))
}

// ---------------------------------------------------------------------------
// shape contract and gradient flow

pub fn criterion_shapes() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let crop = 16;
    let dims = VolumeDims::new(8, 40, 48);
    let mut checked = 0;
    for kind in [EncoderKind::CnnRes2, EncoderKind::CnnPlain] {
        for mode in ConditioningMode::ALL {
            let backbone = match kind {
                EncoderKind::CnnRes2 => BackboneSpec::res2(vec![8, 16, 32]),
                EncoderKind::CnnPlain => BackboneSpec::unet(vec![8, 16, 32]),
            };
            let mut cond = ConditioningConfig::new(mode);
            cond.hid_dim = 16;
            cond.heads = 2;
            let model = ModelConfig {
                backbone,
                conditioning: cond,
                seed: 5,
                dtype: DType::F64,
            }
            .build()
            .map_err(err)?;
            let batch = tiny_batch(&mut rng, 4, crop, dims)?;
            let logits = model.forward(&batch, &mut Forward::eval()).map_err(err)?;
            if logits.dims() != [4, 2, crop, crop] {
                return Err(format!("{kind:?}/{mode}: logits {:?}", logits.dims()));
            }
            let masks = binary_tensor(&mut rng, &[4, crop, crop])?;
            let loss = batch_loss(&logits, &masks, &LossConfig::default()).map_err(err)?;
            let grads = loss.backward().map_err(err)?;
            for (name, var) in model.store().vars() {
                let g = grads
                    .get(var.as_tensor())
                    .ok_or_else(|| format!("{kind:?}/{mode}: {name} receives no gradient"))?;
                let mag = scalar(&g.abs().and_then(|a| a.sum_all()).map_err(err)?)?;
                if !(mag > 0.0 && mag.is_finite()) {
                    return Err(format!("{kind:?}/{mode}: {name} gradient magnitude {mag}"));
                }
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} backbone/mode pairs: logits (B,2,h,w), no dead parameters"))
}

// ---------------------------------------------------------------------------
// parameter counts

fn conv(i: usize, o: usize, k: usize) -> usize {
    o * i * k * k + o
}

fn gn(c: usize) -> usize {
    2 * c
}

fn plain_block(i: usize, o: usize) -> usize {
    conv(i, o, 3) + gn(o) + conv(o, o, 3) + gn(o)
}

fn res2_block(i: usize, o: usize, s: usize) -> usize {
    let w = o / s;
    let short = if i != o { conv(i, o, 1) } else { 0 };
    conv(i, o, 1) + gn(o) + (s - 1) * (conv(w, w, 3) + gn(w)) + conv(o, o, 1) + gn(o) + short
}

/// Hand count of a backbone: encoder blocks, upsampling convolutions,
/// decoder blocks and the 1x1 head.
pub fn backbone_formula(spec: &BackboneSpec) -> usize {
    let ch = &spec.stage_channels;
    let block = |i, o| match spec.encoder_kind {
        EncoderKind::CnnPlain => plain_block(i, o),
        EncoderKind::CnnRes2 => res2_block(i, o, spec.res2_scales),
    };
    let mut n = 0;
    for (l, &c) in ch.iter().enumerate() {
        n += block(if l == 0 { spec.in_channels } else { ch[l - 1] }, c);
    }
    for l in 0..ch.len() - 1 {
        n += conv(ch[l + 1], ch[l], 3) + gn(ch[l]);
        let merged = match spec.skip_mode {
            unicon::backbone::SkipMode::Sum => ch[l],
            unicon::backbone::SkipMode::Concat => 2 * ch[l],
        };
        n += block(merged, ch[l]);
    }
    n + conv(ch[0], spec.num_classes, 1)
}

/// Parameters added by the bottleneck attention block, its embeddings and
/// decoder coordinate channels.
pub fn consa_hdsc_formula(spec: &BackboneSpec, hid: usize, num_ages: usize) -> usize {
    let c = *spec.stage_channels.last().unwrap();
    let embed = num_ages * hid + 2 * (hid * hid + hid) + (3 * hid + hid) + (hid * hid + hid);
    let consa = (c * hid + hid) + 2 * hid + (3 * hid * hid + 3 * hid) + (hid * hid + hid) + (hid * c + c);
    let k = match spec.encoder_kind {
        EncoderKind::CnnPlain => 3,
        EncoderKind::CnnRes2 => 1,
    };
    let coords: usize = spec.stage_channels[..spec.depth() - 1].iter().map(|&c| 3 * k * k * c).sum();
    embed + consa + coords
}

pub fn criterion_param_overhead() -> Check {
    let mut out = Vec::new();
    for (name, spec) in [("Res2UNet", BackboneSpec::res2_default()), ("UNet", BackboneSpec::unet_default())] {
        let build = |mode| {
            ModelConfig {
                backbone: spec.clone(),
                conditioning: ConditioningConfig::new(mode),
                seed: 0,
                dtype: DType::F32,
            }
            .build()
            .map_err(err)
        };
        let base = build(ConditioningMode::None)?.num_params();
        let cond = build(ConditioningMode::ConsaHdsc)?.num_params();
        let want_base = backbone_formula(&spec);
        let want_extra = consa_hdsc_formula(&spec, 64, 4);
        if base != want_base {
            return Err(format!("{name}: {base} parameters, formula says {want_base}"));
        }
        if cond - base != want_extra {
            return Err(format!("{name}: overhead {}, formula says {want_extra}", cond - base));
        }
        let pct = 100.0 * (cond - base) as f64 / base as f64;
        if pct > 2.0 {
            return Err(format!("{name}: overhead {pct:.2}% exceeds 2%"));
        }
        out.push(format!("{name} {base} -> {cond} (+{pct:.2}%)"));
    }
    Ok(out.join(", "))
}

// ---------------------------------------------------------------------------
// losses

fn t1(v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec(), v.len(), &Device::Cpu).expect("tensor")
}

fn t2(v: &[[f64; 2]]) -> Tensor {
    let flat: Vec<f64> = v.iter().flatten().copied().collect();
    Tensor::from_vec(flat, (v.len(), 2), &Device::Cpu).expect("tensor")
}

fn val(r: unicon::Result<Tensor>) -> std::result::Result<f64, String> {
    scalar(&r.map_err(err)?)
}

pub fn criterion_losses() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..10_000 {
        let n = rng.random_range(1..=32);
        let p: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let g: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
        let d = val(dice_loss(&t1(&p), &t1(&g), 1e-5))?;
        if !(0.0..=1.0).contains(&d) {
            return Err(format!("trial {trial}: dice loss {d} outside [0,1]"));
        }
    }

    let g = [1.0, 0.0, 1.0, 1.0, 0.0];
    let perfect = val(dice_loss(&t1(&g), &t1(&g), 1e-5))?;
    if perfect.abs() > 1e-5 {
        return Err(format!("dice loss at probs = truth is {perfect}"));
    }
    let empty = val(dice_loss(&t1(&[0.0; 4]), &t1(&[0.0; 4]), 1e-5))?;
    if empty != 0.0 {
        return Err(format!("dice loss on two empty masks is {empty}"));
    }
    let onehot: Vec<[f64; 2]> = g.iter().map(|&v| [1.0 - v, v]).collect();
    let ce_perfect = val(ce_loss(&t2(&onehot), &t1(&g)))?;
    if ce_perfect > -(1.0 - CE_EPS).ln() + 1e-15 {
        return Err(format!("cross-entropy of a perfect prediction is {ce_perfect}"));
    }
    let ce_worst = val(ce_loss(&t2(&[[1.0, 0.0]]), &t1(&[1.0])))?;
    if !close(ce_worst, -CE_EPS.ln(), 1e-9) {
        return Err(format!("clamped cross-entropy is {ce_worst}"));
    }

    // worked values, smooth -> 0 limit approximated by a tiny constant
    let third = val(dice_loss(&t1(&[1.0, 1.0, 0.0, 0.0]), &t1(&[1.0, 0.0, 0.0, 0.0]), 1e-12))?;
    if !close(third, 1.0 / 3.0, 1e-9) {
        return Err(format!("dice example gave {third}, expected 1/3"));
    }
    let ln2 = val(ce_loss(&t2(&[[0.5, 0.5]]), &t1(&[1.0])))?;
    if !close(ln2, std::f64::consts::LN_2, 1e-9) {
        return Err(format!("cross-entropy example gave {ln2}, expected ln 2"));
    }

    // endpoints and a midpoint of the convex combination
    let probs: Vec<[f64; 2]> = (0..12)
        .map(|_| {
            let p: f64 = rng.random_range(0.05..0.95);
            [1.0 - p, p]
        })
        .collect();
    let truth: Vec<f64> = (0..12).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
    let (p, t) = (t2(&probs), t1(&truth));
    let fg: Vec<f64> = probs.iter().map(|r| r[1]).collect();
    let dice = val(dice_loss(&t1(&fg), &t, 1e-5))?;
    let ce = val(ce_loss(&p, &t))?;
    let at = |alpha: f64| {
        let cfg = LossConfig {
            alpha,
            ..LossConfig::default()
        };
        val(segmentation_loss(&p, &t, &cfg))
    };
    if at(1.0)? != dice || at(0.0)? != ce {
        return Err("alpha endpoints do not select the single terms exactly".into());
    }
    if !close(at(0.5)?, 0.5 * dice + 0.5 * ce, 1e-12) {
        return Err("alpha = 0.5 is not the equal-weight average".into());
    }
    Ok("10^4 random dice losses in [0,1]; limits, endpoints, 1/3 and ln 2 reproduce".into())
}

// ---------------------------------------------------------------------------
// phantom fixtures

/// Small phantom used by the training experiments.
pub fn experiment_params() -> PhantomParams {
    PhantomParams {
        depth: 32,
        height: 48,
        width: 48,
        noise_sigma: 0.05,
        annotated_fraction: 0.375,
    }
}

pub fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, body).expect("write config");
    p
}

pub fn cli(args: &[&str]) -> i32 {
    unicon::cli::run(std::iter::once("unicon").chain(args.iter().copied()))
}

// ---------------------------------------------------------------------------
// reproducibility

fn read_csv(path: &Path) -> std::result::Result<Vec<Vec<String>>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(text.lines().map(|l| l.split(',').map(str::to_string).collect()).collect())
}

/// Largest numeric difference between two CSV files of identical layout;
/// non-numeric cells must match exactly.
pub fn csv_max_diff(a: &Path, b: &Path) -> std::result::Result<f64, String> {
    let (a, b) = (read_csv(a)?, read_csv(b)?);
    if a.len() != b.len() {
        return Err(format!("{} rows vs {}", a.len(), b.len()));
    }
    let mut worst: f64 = 0.0;
    for (ra, rb) in a.iter().zip(&b) {
        if ra.len() != rb.len() {
            return Err("row lengths differ".into());
        }
        for (x, y) in ra.iter().zip(rb) {
            match (x.parse::<f64>(), y.parse::<f64>()) {
                (Ok(x), Ok(y)) => worst = worst.max((x - y).abs()),
                _ if x == y => {}
                _ => return Err(format!("cell {x:?} vs {y:?}")),
            }
        }
    }
    Ok(worst)
}

fn run_cli(args: &[&str]) -> std::result::Result<(), String> {
    match cli(args) {
        0 => Ok(()),
        code => Err(format!("`unicon {}` exited with {code}", args.join(" "))),
    }
}

pub const REPRO_TOL: f64 = 1e-6;

/// Small end-to-end setup: phantom data plus a config for a short run.
pub fn tiny_project(dir: &Path) -> std::result::Result<PathBuf, String> {
    let data = dir.join("data");
    let body = format!(
        r#"seed = 4
[phantom]
phantom_depth = 16
phantom_height = 32
phantom_width = 32
volumes_per_age = 1
annotated_fraction = 0.25

[data]
train_manifest = "{0}/train/manifest.json"
test_manifest = "{0}/test/manifest.json"
unseen_manifests = ["{0}/mut_a/manifest.json", "{0}/mut_b/manifest.json"]

[model]
stage_channels = [8, 16, 32]
hid_dim = 16
heads = 2

[train]
epochs = 2
steps_per_epoch = 3
batch_size = 4
crop_size = 16
val_every = 2
"#,
        data.display()
    );
    let cfg = write_config(dir, &body);
    run_cli(&["gen-phantom", "-c", cfg.to_str().unwrap(), "-o", data.to_str().unwrap()])?;
    Ok(cfg)
}

pub fn criterion_reproducibility() -> Check {
    let tmp = tempfile::tempdir().map_err(err)?;
    let root = tmp.path();
    let cfg = tiny_project(root)?;
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let (o1, o2) = (root.join("run1"), root.join("run2"));
    run_cli(&["train", "-c", &s(&cfg), "-o", &s(&o1)])?;
    let resolved = o1.join(unicon::config::RESOLVED_CONFIG);
    run_cli(&["train", "-c", &s(&resolved), "-o", &s(&o2)])?;
    let log_diff = csv_max_diff(&o1.join("metrics.csv"), &o2.join("metrics.csv"))?;
    let report_diff = csv_max_diff(&o1.join("report.csv"), &o2.join("report.csv"))?;
    if log_diff > REPRO_TOL || report_diff > REPRO_TOL {
        return Err(format!("train rerun differs: log {log_diff:.2e}, report {report_diff:.2e}"));
    }

    let ckpt = o1.join(unicon::train::FINAL_CHECKPOINT);
    let (e1, e2) = (root.join("eval1"), root.join("eval2"));
    run_cli(&["eval", "-c", &s(&cfg), "--checkpoint", &s(&ckpt), "-o", &s(&e1)])?;
    run_cli(&["eval", "-c", &s(&e1.join(unicon::config::RESOLVED_CONFIG)), "-o", &s(&e2)])?;
    let eval_diff = csv_max_diff(&e1.join("report.csv"), &e2.join("report.csv"))?;
    if eval_diff > REPRO_TOL {
        return Err(format!("eval rerun differs by {eval_diff:.2e}"));
    }

    // interrupted at step 3, saved, reloaded and finished
    let config = unicon::config::Config::load(Some(&resolved), &[]).map_err(err)?;
    let manifest = unicon::data::load_manifest(config.train_manifest.as_ref().unwrap()).map_err(err)?;
    let data = || unicon::train::TrainData::load(&manifest, config.val_fraction, config.seed).map_err(err);
    let mut whole = unicon::train::Trainer::new(&config, config.model().build().map_err(err)?, data()?).map_err(err)?;
    whole.run().map_err(err)?;
    let mut first = unicon::train::Trainer::new(&config, config.model().build().map_err(err)?, data()?).map_err(err)?;
    first.run_until(3).map_err(err)?;
    let path = root.join("mid.safetensors");
    first.checkpoint().map_err(err)?.save(&path).map_err(err)?;
    drop(first);
    let ckpt = unicon::checkpoint::Checkpoint::load(&path).map_err(err)?;
    let mut resumed = unicon::train::Trainer::resume(&ckpt, data()?).map_err(err)?;
    resumed.run().map_err(err)?;
    let mut param_diff: f64 = 0.0;
    for (name, var) in whole.model().store().vars() {
        let other = resumed.model().store().get(name).ok_or_else(|| format!("{name} missing after resume"))?;
        let d = scalar(
            &(var.as_tensor() - other.as_tensor())
                .and_then(|t| t.abs())
                .and_then(|t| t.max_all())
                .map_err(err)?,
        )?;
        param_diff = param_diff.max(d);
    }
    let mut log_resume: f64 = 0.0;
    if whole.log().len() != resumed.log().len() {
        return Err("resumed log has a different length".into());
    }
    for (a, b) in whole.log().iter().zip(resumed.log()) {
        log_resume = log_resume.max((a.loss - b.loss).abs()).max((a.lr - b.lr).abs());
        if let (Some(x), Some(y)) = (a.dice_val, b.dice_val) {
            log_resume = log_resume.max((x - y).abs());
        } else if a.dice_val.is_some() != b.dice_val.is_some() {
            return Err(format!("validation schedule differs at step {}", a.step));
        }
    }
    if param_diff > REPRO_TOL || log_resume > REPRO_TOL {
        return Err(format!("resume differs: params {param_diff:.2e}, log {log_resume:.2e}"));
    }
    Ok(format!(
        "rerun log {log_diff:.1e}, eval {eval_diff:.1e}; resume params {param_diff:.1e}, log {log_resume:.1e}"
    ))
}
