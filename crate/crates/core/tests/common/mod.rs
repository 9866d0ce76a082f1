//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ptrack::autodiff::{
    finite_diff_check, finite_diff_check_params, GradCheckReport, ParamGroup, ParamStore, Registry, Tape, Tensor, Var,
};
use ptrack::data::{generate_clip, GenConfig};
use ptrack::harness::train::{crop_sample, mask_sample, prompt_store, sample_objective, Sample};
use ptrack::harness::TrackerConfig;
use ptrack::heads::{BoxHead, SegHead};
use ptrack::losses::{
    boxinst_projection_loss, gaussian_target, giou_loss, l1_box_loss, mask_bce_dice, weighted_focal, BoxVars,
};
use ptrack::model::{FoundationTracker, PromptTracker, Tracker};
use ptrack::nn::Linear;
use ptrack::peft::adapter::attach;
use ptrack::peft::prompter::{Alignment, CmtPrompter, PromptTokens};
use ptrack::vit::{BackboneConfig, EncoderLayer};
use ptrack::{BBox, Error, Modality, Task};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub type Checks = Vec<(String, GradCheckReport)>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in `[0.2, 1)` and random sign, away from kinks at 0.
pub fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(y ∘ r)` for a fixed random `r`, so every output entry matters.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, Error> {
    let r = uniform(&mut rng(seed), tape.shape(y), -1.0, 1.0);
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

/// Overwrites every parameter of `store` in `group` with small random values.
pub fn randomize_group(store: &mut ParamStore, group: ParamGroup, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect();
    for id in ids {
        let shape = store.get(id).value.shape().to_vec();
        store.set(id, uniform(&mut r, &shape, -0.3, 0.3)).unwrap();
    }
}

fn check<F>(out: &mut Checks, name: &str, x: &Tensor, f: F)
where
    F: Fn(&mut Tape, Var) -> Result<Var, Error>,
{
    let report = finite_diff_check(f, x, STEP, TOL).unwrap_or_else(|e| panic!("{name}: {e}"));
    out.push((name.to_string(), report));
}

/// Every primitive of the tape, each with a random input.
pub fn op_checks() -> Checks {
    let mut out = Checks::new();
    let mut r = rng(1);
    let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let c34 = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let c4 = uniform(&mut r, &[4], -1.0, 1.0);
    let b45 = uniform(&mut r, &[4, 5], -1.0, 1.0);
    let pos = uniform(&mut r, &[3, 4], 0.5, 2.0);
    let kinked = off_zero(&mut r, &[3, 4]);
    let gap = off_zero(&mut r, &[3, 4]);

    macro_rules! unary {
        ($name:expr, $x:expr, |$t:ident, $v:ident| $body:expr) => {
            check(&mut out, $name, $x, |$t: &mut Tape, $v: Var| {
                let y = $body;
                weighted_sum($t, y, 9)
            });
        };
    }
    macro_rules! binary {
        ($name:expr, $x:expr, $c:expr, $method:ident) => {{
            let c = $c.clone();
            check(&mut out, &format!("{} (lhs)", $name), $x, |t: &mut Tape, v: Var| {
                let k = t.constant(c.clone());
                let y = t.$method(v, k)?;
                weighted_sum(t, y, 9)
            });
            let x = $x.clone();
            check(&mut out, &format!("{} (rhs)", $name), &c, |t: &mut Tape, v: Var| {
                let k = t.constant(x.clone());
                let y = t.$method(k, v)?;
                weighted_sum(t, y, 9)
            });
        }};
    }

    binary!("add", &a, c34, add);
    binary!("add broadcast", &a, c4, add);
    binary!("sub", &a, c34, sub);
    binary!("mul", &a, c34, mul);
    binary!("mul broadcast", &a, c4, mul);
    binary!("div", &a, pos, div);
    let shifted = Tensor::new(vec![3, 4], a.data().iter().zip(gap.data()).map(|(x, g)| x + g).collect()).unwrap();
    binary!("maximum", &a, shifted, maximum);
    binary!("minimum", &a, shifted, minimum);
    binary!("matmul", &a, b45, matmul);
    let ba = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    let bb = uniform(&mut r, &[2, 4, 2], -1.0, 1.0);
    binary!("batched matmul", &ba, bb, matmul);

    unary!("relu", &kinked, |t, v| t.relu(v));
    unary!("gelu", &a, |t, v| t.gelu(v));
    unary!("sigmoid", &a, |t, v| t.sigmoid(v));
    unary!("log", &pos, |t, v| t.log(v));
    unary!("exp", &a, |t, v| t.exp(v));
    unary!("abs", &kinked, |t, v| t.abs(v));
    unary!("powf", &pos, |t, v| t.powf(v, 1.7));
    unary!("clamp", &kinked, |t, v| t.clamp(v, -0.1, 0.1));
    unary!("affine", &a, |t, v| t.affine(v, -1.5, 0.25));
    unary!("softmax_lastdim", &a, |t, v| t.softmax_lastdim(v));
    unary!("layernorm_lastdim", &a, |t, v| t.layernorm_lastdim(v));
    unary!("reshape", &a, |t, v| t.reshape(v, &[2, 6])?);
    unary!("permute", &ba, |t, v| t.permute(v, &[2, 0, 1])?);
    unary!("transpose_last2", &ba, |t, v| t.transpose_last2(v)?);
    unary!("slice_firstdim", &a, |t, v| t.slice_firstdim(v, 1, 3)?);
    unary!("gather_rows", &a, |t, v| t.gather_rows(v, &[2, 0, 2])?);
    unary!("sum_dim", &ba, |t, v| t.sum_dim(v, 1)?);
    unary!("max_dim", &ba, |t, v| t.max_dim(v, 2)?);
    check(&mut out, "concat_firstdim", &a, |t, v| {
        let k = t.constant(c34.clone());
        let y = t.concat_firstdim(&[k, v, v])?;
        weighted_sum(t, y, 9)
    });
    check(&mut out, "sum", &a, |t, v| {
        let s = t.sum(v);
        Ok(t.mul(s, s)?)
    });
    check(&mut out, "mean", &a, |t, v| {
        let s = t.mean(v);
        Ok(t.mul(s, s)?)
    });

    let img = uniform(&mut r, &[1, 2, 5, 5], -1.0, 1.0);
    let w = uniform(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
    let bias = uniform(&mut r, &[3], -0.5, 0.5);
    for (stride, pad) in [(1, 1), (2, 0)] {
        let (w2, b2) = (w.clone(), bias.clone());
        check(&mut out, &format!("conv2d input s{stride} p{pad}"), &img, move |t, v| {
            let wv = t.constant(w2.clone());
            let bv = t.constant(b2.clone());
            let y = t.conv2d(v, wv, Some(bv), stride, pad)?;
            weighted_sum(t, y, 9)
        });
        let (i2, b2) = (img.clone(), bias.clone());
        check(&mut out, &format!("conv2d weight s{stride} p{pad}"), &w, move |t, v| {
            let iv = t.constant(i2.clone());
            let bv = t.constant(b2.clone());
            let y = t.conv2d(iv, v, Some(bv), stride, pad)?;
            weighted_sum(t, y, 9)
        });
        let (i2, w2) = (img.clone(), w.clone());
        check(&mut out, &format!("conv2d bias s{stride} p{pad}"), &bias, move |t, v| {
            let iv = t.constant(i2.clone());
            let wv = t.constant(w2.clone());
            let y = t.conv2d(iv, wv, Some(v), stride, pad)?;
            weighted_sum(t, y, 9)
        });
    }
    out
}

/// Layers and heads with respect to their inputs.
pub fn module_checks() -> Checks {
    let mut out = Checks::new();
    let mut r = rng(2);
    let toy = BackboneConfig::toy();
    let d = toy.dim;

    let mut reg = Registry::new();
    let layer = EncoderLayer::declare(&mut reg, "layer", d, toy.heads, toy.mlp_hidden(), ParamGroup::Backbone).unwrap();
    let mut store = ParamStore::materialize(&reg, 3);
    randomize_group(&mut store, ParamGroup::Backbone, 4);
    let x = uniform(&mut r, &[6, d], -1.0, 1.0);
    check(&mut out, "encoder layer (D=16, N=6)", &x, |t, v| {
        let y = layer.forward(t, &store, v)?;
        weighted_sum(t, y, 5)
    });

    let mut reg = Registry::new();
    let mut lin = Linear::declare(&mut reg, "lin", d, 8, true, ParamGroup::Backbone).unwrap();
    attach(&mut reg, &mut lin, 4, 0.5).unwrap();
    let mut store = ParamStore::materialize(&reg, 3);
    randomize_group(&mut store, ParamGroup::Adapter, 6);
    let x = off_zero(&mut r, &[5, d]);
    check(&mut out, "linear with adapter", &x, |t, v| {
        let y = lin.forward(t, &store, v)?;
        weighted_sum(t, y, 5)
    });

    let grid = toy.grid(toy.search_size);
    let tokens = uniform(&mut r, &[grid * grid, d], -1.0, 1.0);
    let mut reg = Registry::new();
    let head = BoxHead::declare(&mut reg, d, 16).unwrap();
    let store = ParamStore::materialize(&reg, 3);
    check(&mut out, "box head", &tokens, |t, v| {
        let maps = head.forward(t, &store, v)?;
        let a = weighted_sum(t, maps.score, 5)?;
        let b = weighted_sum(t, maps.offset, 6)?;
        let c = weighted_sum(t, maps.size, 7)?;
        let ab = t.add(a, b)?;
        Ok(t.add(ab, c)?)
    });
    check(&mut out, "box head mean score", &tokens, |t, v| {
        let maps = head.forward(t, &store, v)?;
        Ok(t.mean(maps.score))
    });

    let mut reg = Registry::new();
    let seg = SegHead::declare(&mut reg, d, toy.patch_size, 16).unwrap();
    let mut store = ParamStore::materialize(&reg, 3);
    randomize_group(&mut store, ParamGroup::SegHead, 8);
    check(&mut out, "segmentation head", &tokens, |t, v| {
        let y = seg.forward(t, &store, v)?;
        weighted_sum(t, y, 5)
    });

    for modality in [Modality::Thermal, Modality::Language] {
        let (nz, ns) = (4, 6);
        let mut reg = Registry::new();
        let pr = CmtPrompter::declare(&mut reg, "p", d, 8, modality).unwrap();
        let mut store = ParamStore::materialize(&reg, 3);
        randomize_group(&mut store, ParamGroup::Prompter, 9);
        let rows = if modality == Modality::Language { 5 } else { nz + ns };
        let p = uniform(&mut r, &[rows, d], -1.0, 1.0);
        let alignment = if modality == Modality::Language { Alignment::Free } else { Alignment::Full };
        let h = uniform(&mut r, &[nz + ns, d], -1.0, 1.0);
        check(&mut out, &format!("prompter {modality:?} wrt matching tokens"), &h, |t, v| {
            let pv = t.constant(p.clone());
            let prompt = PromptTokens { tokens: pv, modality, alignment };
            let y = pr.forward(t, &store, v, &prompt, nz)?;
            weighted_sum(t, y, 5)
        });
        check(&mut out, &format!("prompter {modality:?} wrt prompt tokens"), &p, |t, v| {
            let hv = t.constant(h.clone());
            let prompt = PromptTokens { tokens: v, modality, alignment };
            let y = pr.forward(t, &store, hv, &prompt, nz)?;
            weighted_sum(t, y, 5)
        });
    }
    out
}

/// Each loss with respect to its prediction input.
pub fn loss_checks() -> Checks {
    let mut out = Checks::new();
    let mut r = rng(3);
    let gt = BBox::new(0.45, 0.55, 0.3, 0.2);

    let score = uniform(&mut r, &[8, 8], 0.05, 0.95);
    let target = gaussian_target(gt, 8);
    check(&mut out, "weighted focal", &score, |t, v| weighted_focal(t, v, &target));

    let boxes = [
        Tensor::new(vec![4, 1], vec![0.5, 0.5, 0.25, 0.32]).unwrap(),
        Tensor::new(vec![4, 1], vec![0.9, 0.1, 0.1, 0.15]).unwrap(),
    ];
    for (i, b) in boxes.iter().enumerate() {
        let split = |t: &mut Tape, v: Var| -> Result<BoxVars, Error> {
            Ok(BoxVars { center: t.slice_firstdim(v, 0, 2)?, size: t.slice_firstdim(v, 2, 4)? })
        };
        check(&mut out, &format!("giou loss #{i}"), b, |t, v| {
            let p = split(t, v)?;
            giou_loss(t, p, gt)
        });
        check(&mut out, &format!("l1 box loss #{i}"), b, |t, v| {
            let p = split(t, v)?;
            l1_box_loss(t, p, gt)
        });
    }

    let logits = uniform(&mut r, &[16, 16], -3.0, 3.0);
    check(&mut out, "box projection loss", &logits, |t, v| boxinst_projection_loss(t, v, gt));
    let logits = off_zero(&mut r, &[16, 16]).map(|x| 3.0 * x);
    let mut mask = Tensor::zeros(&[16, 16]);
    for y in 4..10 {
        for x in 3..12 {
            mask.data_mut()[y * 16 + x] = 1.0;
        }
    }
    check(&mut out, "mask bce + dice", &logits, |t, v| mask_bce_dice(t, v, &mask));
    out
}

fn toy_config(task: Task) -> TrackerConfig {
    let mut cfg = TrackerConfig::toy();
    cfg.set("task", &task.to_string()).unwrap();
    cfg.finish().unwrap()
}

fn clip() -> ptrack::data::Clip {
    generate_clip(5, &GenConfig { size: 64, length: 4, distractors: 1, ..GenConfig::default() }).unwrap()
}

fn sample_for(model: &dyn Tracker, cfg: &TrackerConfig) -> Sample {
    let c = clip();
    if model.task().is_mask() {
        mask_sample(model, &c, 2).unwrap()
    } else {
        crop_sample(model, &c, 0, 2, cfg, &mut rng(7)).unwrap()
    }
}

/// Parameter gradients of the complete training objective.
fn objective_check(model: &dyn Tracker, store: &mut ParamStore, cfg: &TrackerConfig, probes: usize) -> GradCheckReport {
    let sample = sample_for(model, cfg);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    finite_diff_check_params(
        store,
        |t: &mut Tape, s: &ParamStore| sample_objective(t, model, s, &sample, cfg).map(|(l, _)| l),
        &ids,
        STEP,
        TOL,
        probes,
    )
    .unwrap()
}

/// Stage-1 loss over every foundation parameter and stage-2 losses over
/// every trainable parameter of prompt trackers.
pub fn objective_checks() -> Checks {
    let mut out = Checks::new();
    let cfg = toy_config(Task::Rgb);
    let model = FoundationTracker::new(&cfg.foundation).unwrap();
    let mut store = ParamStore::materialize(model.registry(), 11);
    out.push(("stage-1 loss".into(), objective_check(&model, &mut store, &cfg, 3)));

    for modality in [Modality::Thermal, Modality::Language, Modality::Mask] {
        let task = Task::RgbX(modality);
        let cfg = toy_config(task);
        let model = PromptTracker::new(&cfg.foundation, &cfg.prompt, modality).unwrap();
        let mut store = prompt_store(&model, &ParamStore::materialize(model.foundation().registry(), 11), 12).unwrap();
        // Zero-initialized up-maps would hide the down-path gradients.
        randomize_group(&mut store, ParamGroup::Adapter, 13);
        randomize_group(&mut store, ParamGroup::Prompter, 14);
        out.push((format!("stage-2 loss ({task})"), objective_check(&model, &mut store, &cfg, 3)));
    }
    out
}

/// Prints one line per check and returns the names that failed.
pub fn failures(checks: &Checks) -> Vec<String> {
    let mut bad = Vec::new();
    for (name, r) in checks {
        let ok = r.passed();
        println!(
            "  {} {name}: max rel err {:.2e} at {} over {} coordinates",
            if ok { "ok  " } else { "FAIL" },
            r.max_rel_err,
            r.worst,
            r.checked
        );
        if !ok {
            bad.push(name.clone());
        }
    }
    bad
}

pub const MODALITIES: [Modality; 5] =
    [Modality::Language, Modality::Mask, Modality::Depth, Modality::Thermal, Modality::Event];

/// Random images and prompt payload shaped for `modality` at the toy sizes.
pub struct RandomInputs {
    pub templates: Vec<Tensor>,
    pub search: Tensor,
    pub prompt: Option<ptrack::peft::PromptInput>,
}

impl RandomInputs {
    pub fn new(r: &mut ChaCha8Rng, b: &BackboneConfig, modality: Modality, vocab: usize) -> Self {
        use ptrack::peft::PromptInput;
        let (z, s) = (b.template_size, b.search_size);
        let search = uniform(r, &[3, s, s], 0.0, 1.0);
        let binary = |r: &mut ChaCha8Rng| {
            let m = uniform(r, &[1, s, s], 0.0, 1.0);
            m.map(|v| if v > 0.7 { 1.0 } else { 0.0 })
        };
        match modality {
            Modality::Language => {
                let n = r.gen_range(1..=ptrack::peft::MAX_TEXT_TOKENS);
                let ids = (0..n).map(|_| r.gen_range(0..vocab)).collect();
                Self { templates: vec![uniform(r, &[3, z, z], 0.0, 1.0)], search, prompt: Some(PromptInput::Text(ids)) }
            }
            Modality::Mask => {
                let templates = vec![uniform(r, &[3, s, s], 0.0, 1.0), uniform(r, &[3, s, s], 0.0, 1.0)];
                let masks = vec![binary(r), binary(r)];
                Self { templates, search, prompt: Some(PromptInput::Masks(masks)) }
            }
            _ => {
                let templates = vec![uniform(r, &[3, z, z], 0.0, 1.0)];
                let maps = PromptInput::Maps {
                    templates: vec![uniform(r, &[1, z, z], 0.0, 1.0)],
                    search: uniform(r, &[1, s, s], 0.0, 1.0),
                };
                Self { templates, search, prompt: Some(maps) }
            }
        }
    }

    pub fn with_prompt(&self, prompt: Option<ptrack::peft::PromptInput>) -> Self {
        Self { templates: self.templates.clone(), search: self.search.clone(), prompt }
    }
}

/// Score, offset, size and mask logits of one forward pass, flattened.
pub fn forward_values(model: &dyn Tracker, store: &ParamStore, inputs: &RandomInputs) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let i = ptrack::model::TrackerInputs {
        templates: &inputs.templates,
        search: &inputs.search,
        prompt: inputs.prompt.as_ref(),
    };
    let out = model.forward(&mut tape, store, &i, true).unwrap();
    let mut v = vec![
        tape.value(out.maps.score).clone(),
        tape.value(out.maps.offset).clone(),
        tape.value(out.maps.size).clone(),
    ];
    v.extend(out.mask_logits.map(|m| tape.value(m).clone()));
    v
}

pub fn max_diff(a: &[Tensor], b: &[Tensor]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

/// Largest foundation/prompt forward difference at initialization over
/// `trials` random inputs, for each modality.
pub fn init_equivalence(trials: usize, seed: u64) -> Vec<(Modality, f64)> {
    let cfg = TrackerConfig::toy();
    let foundation = FoundationTracker::new(&cfg.foundation).unwrap();
    let fstore = ParamStore::materialize(foundation.registry(), seed);
    let mut r = rng(seed + 1);
    MODALITIES
        .iter()
        .map(|&m| {
            let model = PromptTracker::new(&cfg.foundation, &cfg.prompt, m).unwrap();
            let store = prompt_store(&model, &fstore, seed + 2).unwrap();
            let worst = (0..trials)
                .map(|_| {
                    let inputs = RandomInputs::new(&mut r, &cfg.foundation.backbone, m, cfg.prompt.vocab_size);
                    let a = forward_values(&foundation, &fstore, &inputs.with_prompt(None));
                    let b = forward_values(&model, &store, &inputs);
                    max_diff(&a, &b)
                })
                .fold(0.0, f64::max);
            (m, worst)
        })
        .collect()
}
