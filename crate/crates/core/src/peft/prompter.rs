//! Cross-modal prompters that turn matching tokens plus prompt tokens into
//! a residual added to the matching tokens.

use crate::autodiff::{Init, ParamGroup, ParamStore, Registry, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::task::Modality;

/// How prompt rows line up with the matching tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alignment {
    /// One row per matching token, template rows first.
    Full,
    /// One row per template token only; search rows are implicitly zero.
    Template,
    /// Arbitrary length, used only by text prompts.
    Free,
}

/// Prompt state flowing alongside the matching tokens.
#[derive(Clone, Copy, Debug)]
pub struct PromptTokens {
    pub tokens: Var,
    pub modality: Modality,
    pub alignment: Alignment,
}

impl PromptTokens {
    /// Checks the row count against the matching-token partition.
    pub fn check(&self, tape: &Tape, n_template: usize, n_search: usize, dim: usize) -> Result<()> {
        let shape = tape.shape(self.tokens);
        if shape.len() != 2 || shape[1] != dim {
            return Err(Error::Shape(format!("prompt tokens must be (N_p, {dim}), got {shape:?}")));
        }
        let rows = shape[0];
        let ok = match self.alignment {
            Alignment::Full => rows == n_template + n_search,
            Alignment::Template => rows == n_template,
            Alignment::Free => self.modality == Modality::Language && rows > 0,
        };
        if !ok {
            return Err(Error::Shape(format!(
                "{:?} prompt with {:?} alignment has {rows} rows; partition is {n_template} template + {n_search} search",
                self.modality, self.alignment
            )));
        }
        Ok(())
    }
}

/// Fusion of the two latents.
#[derive(Clone, Debug)]
pub enum Fusion {
    /// Add aligned latents, then one linear map.
    Linear(Linear),
    /// Single-head attention, queries from the matching latent, keys and
    /// values from the prompt latent.
    CrossAttention { q: Linear, k: Linear, v: Linear },
}

#[derive(Clone, Debug)]
pub struct CmtPrompter {
    pub dim: usize,
    pub latent: usize,
    pub down_h: Linear,
    pub down_p: Linear,
    pub fusion: Fusion,
    pub up: Linear,
}

impl CmtPrompter {
    pub fn declare(reg: &mut Registry, name: &str, dim: usize, latent: usize, modality: Modality) -> Result<Self> {
        if latent == 0 {
            return Err(Error::Config("prompter_latent: must be positive".into()));
        }
        let g = ParamGroup::Prompter;
        let down_h = Linear::declare(reg, &format!("{name}.down_h"), dim, latent, true, g)?;
        let down_p = Linear::declare(reg, &format!("{name}.down_p"), dim, latent, true, g)?;
        let fusion = if modality == Modality::Language {
            Fusion::CrossAttention {
                q: Linear::declare(reg, &format!("{name}.fuse.q"), latent, latent, true, g)?,
                k: Linear::declare(reg, &format!("{name}.fuse.k"), latent, latent, true, g)?,
                v: Linear::declare(reg, &format!("{name}.fuse.v"), latent, latent, true, g)?,
            }
        } else {
            Fusion::Linear(Linear::declare(reg, &format!("{name}.fuse"), latent, latent, true, g)?)
        };
        let up = Linear::declare_with(reg, &format!("{name}.up"), latent, dim, true, g, Init::Zeros)?;
        Ok(Self { dim, latent, down_h, down_p, fusion, up })
    }

    /// Computes the next prompt state `(N_z + N_s, D)` from `h` and `p`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        h: Var,
        p: &PromptTokens,
        n_template: usize,
    ) -> Result<Var> {
        let n = tape.shape(h)[0];
        p.check(tape, n_template, n - n_template, self.dim)?;
        let h_lat = self.down_h.forward(tape, store, h)?;
        let mut p_lat = self.down_p.forward(tape, store, p.tokens)?;
        if p.alignment == Alignment::Template {
            let pad = tape.constant(Tensor::zeros(&[n - n_template, self.latent]));
            p_lat = tape.concat_firstdim(&[p_lat, pad])?;
        }
        let fused = match &self.fusion {
            Fusion::Linear(lin) => {
                if p.alignment == Alignment::Free {
                    return Err(Error::Shape("linear fusion needs token-aligned prompts".into()));
                }
                let sum = tape.add(h_lat, p_lat)?;
                lin.forward(tape, store, sum)?
            }
            Fusion::CrossAttention { q, k, v } => {
                let q = q.forward(tape, store, h_lat)?;
                let k = k.forward(tape, store, p_lat)?;
                let v = v.forward(tape, store, p_lat)?;
                let kt = tape.transpose_last2(k)?;
                let scores = tape.matmul(q, kt)?;
                let scores = tape.scale(scores, 1.0 / (self.latent as f64).sqrt());
                let attn = tape.softmax_lastdim(scores);
                tape.matmul(attn, v)?
            }
        };
        self.up.forward(tape, store, fused)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let shape = store.get(id).value.shape().to_vec();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            store.set(id, Tensor::new(shape, data).unwrap()).unwrap();
        }
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        let c = t.shape()[1];
        t.data().chunks(c).map(|r| r.to_vec()).collect()
    }

    /// `x·W + b` on plain nested vectors.
    fn affine(x: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
        let w = rows(w);
        x.iter()
            .map(|row| {
                (0..b.numel())
                    .map(|j| b.data()[j] + row.iter().enumerate().map(|(i, v)| v * w[i][j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn thermal_fusion_matches_dense_evaluation() {
        let (d, m, nz, ns) = (8, 4, 2, 4);
        let mut reg = Registry::new();
        let pr = CmtPrompter::declare(&mut reg, "p", d, m, Modality::Thermal).unwrap();
        let mut store = ParamStore::materialize(&reg, 0);
        randomize(&mut store, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = Tensor::new(vec![nz + ns, d], (0..(nz + ns) * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let p = Tensor::new(vec![nz + ns, d], (0..(nz + ns) * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let pv = tape.constant(p.clone());
        let prompt = PromptTokens { tokens: pv, modality: Modality::Thermal, alignment: Alignment::Full };
        let out = pr.forward(&mut tape, &store, hv, &prompt, nz).unwrap();

        let val = |lin: &Linear| (store.get(lin.weight).value.clone(), store.get(lin.bias.unwrap()).value.clone());
        let (w, b) = val(&pr.down_h);
        let hl = affine(&rows(&h), &w, &b);
        let (w, b) = val(&pr.down_p);
        let pl = affine(&rows(&p), &w, &b);
        let sum: Vec<Vec<f64>> =
            hl.iter().zip(&pl).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
        let Fusion::Linear(f) = &pr.fusion else { panic!() };
        let (w, b) = val(f);
        let fused = affine(&sum, &w, &b);
        let (w, b) = val(&pr.up);
        let want = affine(&fused, &w, &b);
        let got = rows(tape.value(out));
        for (gr, wr) in got.iter().zip(&want) {
            for (g, w) in gr.iter().zip(wr) {
                assert!((g - w).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_text_token_gives_identical_latent_rows() {
        let (d, m) = (8, 4);
        let mut reg = Registry::new();
        let pr = CmtPrompter::declare(&mut reg, "p", d, m, Modality::Language).unwrap();
        let mut store = ParamStore::materialize(&reg, 0);
        randomize(&mut store, 1);
        // Identity up-map exposes the fused latent directly.
        let mut up = Tensor::zeros(&[m, d]);
        for i in 0..m {
            up.data_mut()[i * d + i] = 1.0;
        }
        store.set(pr.up.weight, up).unwrap();
        store.set(pr.up.bias.unwrap(), Tensor::zeros(&[d])).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::new(vec![6, d], (0..48).map(|i| (i as f64 * 0.3).cos()).collect()).unwrap());
        let t = tape.constant(Tensor::new(vec![1, d], (0..8).map(|i| i as f64 * 0.1).collect()).unwrap());
        let prompt = PromptTokens { tokens: t, modality: Modality::Language, alignment: Alignment::Free };
        let out = pr.forward(&mut tape, &store, h, &prompt, 2).unwrap();
        let r = rows(tape.value(out));
        for row in &r[1..] {
            assert_eq!(row, &r[0]);
        }
    }

    #[test]
    fn zero_up_gives_zero_prompt() {
        let mut reg = Registry::new();
        let pr = CmtPrompter::declare(&mut reg, "p", 8, 4, Modality::Mask).unwrap();
        let store = ParamStore::materialize(&reg, 0);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::full(&[6, 8], 0.5));
        let p = tape.constant(Tensor::full(&[2, 8], 1.0));
        let prompt = PromptTokens { tokens: p, modality: Modality::Mask, alignment: Alignment::Template };
        let out = pr.forward(&mut tape, &store, h, &prompt, 2).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn misaligned_prompt_is_rejected() {
        let mut reg = Registry::new();
        let pr = CmtPrompter::declare(&mut reg, "p", 8, 4, Modality::Depth).unwrap();
        let store = ParamStore::materialize(&reg, 0);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(&[6, 8]));
        let p = tape.constant(Tensor::zeros(&[5, 8]));
        let prompt = PromptTokens { tokens: p, modality: Modality::Depth, alignment: Alignment::Full };
        assert!(matches!(pr.forward(&mut tape, &store, h, &prompt, 2), Err(Error::Shape(_))));
        let prompt = PromptTokens { tokens: p, modality: Modality::Depth, alignment: Alignment::Free };
        assert!(pr.forward(&mut tape, &store, h, &prompt, 2).is_err());
    }
}
