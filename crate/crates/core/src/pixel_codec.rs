//! Toy VQ autoencoder over 4x4 image patches: images become a fixed-length
//! sequence of discrete pixel tokens and back. Plain reconstruction +
//! codebook + commitment objective, straight-through gradients, no
//! adversarial terms.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{nearest_row, Graph, NodeId};
use crate::params::{AdamW, Binder, ParamId, ParamStore};
use crate::synth_data::Image;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("non-finite input vector")]
    NonFinite,
    #[error("image size {got} does not match configured {want}")]
    ImageSize { got: usize, want: usize },
    #[error("token id {0} out of range {1}")]
    TokenRange(usize, usize),
    #[error("expected {want} tokens, got {got}")]
    TokenCount { got: usize, want: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub book: usize,
    pub dim: usize,
    pub patch: usize,
    pub hidden: usize,
    pub image: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig { book: 256, dim: 32, patch: 4, hidden: 64, image: 32 }
    }
}

impl CodecConfig {
    pub fn patches_per_side(&self) -> usize {
        assert_eq!(self.image % self.patch, 0, "image size not divisible by patch");
        self.image / self.patch
    }

    /// Number of pixel tokens per image (L_x).
    pub fn tokens_per_image(&self) -> usize {
        let n = self.patches_per_side();
        n * n
    }

    pub fn patch_features(&self) -> usize {
        self.patch * self.patch * 3
    }
}

/// Nearest-neighbor lookup: squared Euclidean distance over codebook rows,
/// ties broken by lowest index. Returns the id and an exact copy of the row.
pub fn quantize(z: &[f64], codebook: &Tensor) -> Result<(usize, Vec<f64>), CodecError> {
    if !z.iter().all(|v| v.is_finite()) {
        return Err(CodecError::NonFinite);
    }
    assert_eq!(z.len(), codebook.cols, "dimension mismatch");
    let id = nearest_row(codebook, z);
    Ok((id, codebook.row(id).to_vec()))
}

/// Parameter handles for the codec within a store. All names are prefixed
/// `codec.` so the stage trainers can freeze the whole codec at once.
pub struct CodecParams {
    pub enc_w1: ParamId,
    pub enc_b1: ParamId,
    pub enc_w2: ParamId,
    pub enc_b2: ParamId,
    pub book: ParamId,
    pub dec_w1: ParamId,
    pub dec_b1: ParamId,
    pub dec_w2: ParamId,
    pub dec_b2: ParamId,
    pub cfg: CodecConfig,
}

impl CodecParams {
    pub fn init(store: &mut ParamStore, cfg: CodecConfig, seed: u64) -> CodecParams {
        let f = cfg.patch_features();
        let rng = |name: &str| ParamStore::init_rng(seed, name);
        let xavier = |r: usize, c: usize, rng: &mut ChaCha8Rng| {
            Tensor::rand_uniform(r, c, (6.0 / (r + c) as f64).sqrt(), rng)
        };
        CodecParams {
            enc_w1: store.add("codec.enc.w1", xavier(f, cfg.hidden, &mut rng("codec.enc.w1")), true),
            enc_b1: store.add("codec.enc.b1", Tensor::zeros(1, cfg.hidden), false),
            enc_w2: store
                .add("codec.enc.w2", xavier(cfg.hidden, cfg.dim, &mut rng("codec.enc.w2")), true),
            enc_b2: store.add("codec.enc.b2", Tensor::zeros(1, cfg.dim), false),
            book: store.add(
                "codec.book",
                Tensor::randn(cfg.book, cfg.dim, 0.5, &mut rng("codec.book")),
                false,
            ),
            dec_w1: store
                .add("codec.dec.w1", xavier(cfg.dim, cfg.hidden, &mut rng("codec.dec.w1")), true),
            dec_b1: store.add("codec.dec.b1", Tensor::zeros(1, cfg.hidden), false),
            dec_w2: store
                .add("codec.dec.w2", xavier(cfg.hidden, f, &mut rng("codec.dec.w2")), true),
            dec_b2: store.add("codec.dec.b2", Tensor::zeros(1, f), false),
            cfg,
        }
    }

    pub fn lookup(store: &ParamStore) -> CodecParams {
        let cfg = CodecConfig {
            book: store.value(store.id("codec.book")).rows,
            dim: store.value(store.id("codec.book")).cols,
            patch: 4,
            hidden: store.value(store.id("codec.enc.w1")).cols,
            image: 32,
        };
        CodecParams {
            enc_w1: store.id("codec.enc.w1"),
            enc_b1: store.id("codec.enc.b1"),
            enc_w2: store.id("codec.enc.w2"),
            enc_b2: store.id("codec.enc.b2"),
            book: store.id("codec.book"),
            dec_w1: store.id("codec.dec.w1"),
            dec_b1: store.id("codec.dec.b1"),
            dec_w2: store.id("codec.dec.w2"),
            dec_b2: store.id("codec.dec.b2"),
            cfg,
        }
    }

    /// Row-major patch matrix (one row per patch) for a batch of images.
    pub fn patch_matrix(&self, images: &[&Image]) -> Result<Tensor, CodecError> {
        let cfg = &self.cfg;
        for img in images {
            if img.size != cfg.image {
                return Err(CodecError::ImageSize { got: img.size, want: cfg.image });
            }
        }
        let per_side = cfg.patches_per_side();
        let f = cfg.patch_features();
        let mut m = Tensor::zeros(images.len() * cfg.tokens_per_image(), f);
        for (i, img) in images.iter().enumerate() {
            for pr in 0..per_side {
                for pc in 0..per_side {
                    let row = i * cfg.tokens_per_image() + pr * per_side + pc;
                    let mut k = 0;
                    for dr in 0..cfg.patch {
                        for dc in 0..cfg.patch {
                            let px = img.px(pr * cfg.patch + dr, pc * cfg.patch + dc);
                            for ch in 0..3 {
                                m.set(row, k, px[ch] as f64 / 255.0);
                                k += 1;
                            }
                        }
                    }
                    debug_assert_eq!(k, f);
                }
            }
        }
        Ok(m)
    }

    fn patches_to_image(&self, patches: &Tensor, image_index: usize) -> Image {
        let cfg = &self.cfg;
        let per_side = cfg.patches_per_side();
        let mut data = vec![0.0f64; cfg.image * cfg.image * 3];
        for pr in 0..per_side {
            for pc in 0..per_side {
                let row = image_index * cfg.tokens_per_image() + pr * per_side + pc;
                let mut k = 0;
                for dr in 0..cfg.patch {
                    for dc in 0..cfg.patch {
                        let r = pr * cfg.patch + dr;
                        let c = pc * cfg.patch + dc;
                        for ch in 0..3 {
                            data[(r * cfg.image + c) * 3 + ch] = patches.at(row, k);
                            k += 1;
                        }
                    }
                }
            }
        }
        Image::from_f64(cfg.image, &data)
    }

    /// Deterministic eval-mode encode: one pixel token per patch.
    pub fn encode_image(&self, store: &ParamStore, image: &Image) -> Result<Vec<usize>, CodecError> {
        let x = self.patch_matrix(&[image])?;
        let z = self.encode_patches(store, &x);
        let book = store.value(self.book);
        Ok((0..z.rows).map(|r| nearest_row(book, z.row(r))).collect())
    }

    fn encode_patches(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut h = Tensor::matmul(x, false, store.value(self.enc_w1), false);
        add_bias_tanh(&mut h, store.value(self.enc_b1));
        let mut z = Tensor::matmul(&h, false, store.value(self.enc_w2), false);
        add_bias(&mut z, store.value(self.enc_b2));
        z
    }

    /// Deterministic eval-mode decode back to pixels.
    pub fn decode_tokens(&self, store: &ParamStore, ids: &[usize]) -> Result<Image, CodecError> {
        let cfg = &self.cfg;
        if ids.len() != cfg.tokens_per_image() {
            return Err(CodecError::TokenCount { got: ids.len(), want: cfg.tokens_per_image() });
        }
        let book = store.value(self.book);
        let mut e = Tensor::zeros(ids.len(), cfg.dim);
        for (r, &id) in ids.iter().enumerate() {
            if id >= cfg.book {
                return Err(CodecError::TokenRange(id, cfg.book));
            }
            e.row_mut(r).copy_from_slice(book.row(id));
        }
        let mut h = Tensor::matmul(&e, false, store.value(self.dec_w1), false);
        add_bias_tanh(&mut h, store.value(self.dec_b1));
        let mut p = Tensor::matmul(&h, false, store.value(self.dec_w2), false);
        add_bias(&mut p, store.value(self.dec_b2));
        for v in p.data.iter_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        Ok(self.patches_to_image(&p, 0))
    }

    pub fn reconstruct(&self, store: &ParamStore, image: &Image) -> Result<Image, CodecError> {
        let ids = self.encode_image(store, image)?;
        self.decode_tokens(store, &ids)
    }

    /// Training loss over one batch: reconstruction MSE + codebook MSE +
    /// commitment (beta = 0.25). Returns the loss node and the batch's code
    /// usage, for the collapse monitor.
    pub fn step_loss(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        store: &ParamStore,
        patches: &Tensor,
    ) -> (NodeId, Vec<usize>) {
        let x = g.constant(patches.clone());
        let w1 = b.node(g, store, self.enc_w1);
        let b1 = b.node(g, store, self.enc_b1);
        let w2 = b.node(g, store, self.enc_w2);
        let b2 = b.node(g, store, self.enc_b2);
        let h = g.matmul(x, w1);
        let h = g.add_bias(h, b1);
        let h = g.tanh(h);
        let z = g.matmul(h, w2);
        let z = g.add_bias(z, b2);

        let (q, ids) = g.st_quantize(z, store.value(self.book));

        let book = b.node(g, store, self.book);
        let picked = g.gather_rows(book, &ids);
        let z_sg = g.detach(z);
        let codebook_loss = g.mse(picked, z_sg);
        let picked_sg = g.detach(picked);
        let commit_loss = g.mse(z, picked_sg);

        let dw1 = b.node(g, store, self.dec_w1);
        let db1 = b.node(g, store, self.dec_b1);
        let dw2 = b.node(g, store, self.dec_w2);
        let db2 = b.node(g, store, self.dec_b2);
        let dh = g.matmul(q, dw1);
        let dh = g.add_bias(dh, db1);
        let dh = g.tanh(dh);
        let out = g.matmul(dh, dw2);
        let out = g.add_bias(out, db2);
        let recon = g.sigmoid(out);
        let recon_loss = g.mse(recon, x);

        let commit = g.scale(commit_loss, 0.25);
        let aux = g.add(codebook_loss, commit);
        let loss = g.add(recon_loss, aux);
        (loss, ids)
    }
}

fn add_bias(m: &mut Tensor, bias: &Tensor) {
    for r in 0..m.rows {
        for c in 0..m.cols {
            m.data[r * m.cols + c] += bias.data[c];
        }
    }
}

fn add_bias_tanh(m: &mut Tensor, bias: &Tensor) {
    for r in 0..m.rows {
        for c in 0..m.cols {
            let v = m.data[r * m.cols + c] + bias.data[c];
            m.data[r * m.cols + c] = v.tanh();
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodecLogEntry {
    pub step: usize,
    pub loss: f64,
    pub used_codes: usize,
    pub collapse_warning: bool,
}

pub struct CodecTrainOutcome {
    pub log: Vec<CodecLogEntry>,
    pub usage: Vec<u64>,
}

/// Train the codec on rendered images. Data-dependent codebook init (sampled
/// encoder outputs) keeps early usage healthy.
pub fn train_codec(
    store: &mut ParamStore,
    params: &CodecParams,
    images: &[Image],
    steps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> CodecTrainOutcome {
    assert!(!images.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0dec);

    // Codebook init from encoder outputs on random patches.
    {
        let sample: Vec<&Image> =
            (0..8.min(images.len())).map(|_| &images[rng.gen_range(0..images.len())]).collect();
        let x = params.patch_matrix(&sample).expect("sizes match");
        let z = params.encode_patches(store, &x);
        let mut rows: Vec<usize> = (0..z.rows).collect();
        rows.shuffle(&mut rng);
        let book = store.value(params.book).clone();
        let mut new_book = book.clone();
        for k in 0..new_book.rows {
            let src = rows[k % rows.len()];
            for c in 0..new_book.cols {
                new_book.set(k, c, z.at(src, c) + 0.01 * book.at(k, c));
            }
        }
        store.get_mut(params.book).value = new_book;
    }

    let mut opt = AdamW::new(store, lr, 0.0, 0, steps);
    let mut log = Vec::with_capacity(steps);
    let mut usage = vec![0u64; params.cfg.book];
    let mut window_usage = vec![false; params.cfg.book];
    let window = 200usize;

    for step in 0..steps {
        let picks: Vec<&Image> =
            (0..batch).map(|_| &images[rng.gen_range(0..images.len())]).collect();
        let patches = params.patch_matrix(&picks).expect("sizes match");

        let mut g = Graph::new();
        let mut binder = Binder::new();
        let (loss, ids) = params.step_loss(&mut g, &mut binder, store, &patches);
        let loss_v = g.value(loss).item();
        store.zero_grads();
        g.backward(loss);
        binder.apply_grads(&g, store);
        opt.step(store);

        for &id in &ids {
            usage[id] += 1;
            window_usage[id] = true;
        }
        let end_of_window = (step + 1) % window == 0 || step + 1 == steps;
        let used = window_usage.iter().filter(|&&u| u).count();
        let collapse_warning = end_of_window && used * 4 < params.cfg.book;
        log.push(CodecLogEntry { step, loss: loss_v, used_codes: used, collapse_warning });
        if end_of_window {
            window_usage.iter_mut().for_each(|u| *u = false);
        }
    }
    CodecTrainOutcome { log, usage }
}

/// Mean reconstruction L1 over a set of images.
pub fn round_trip_l1(store: &ParamStore, params: &CodecParams, images: &[Image]) -> f64 {
    let mut total = 0.0;
    for img in images {
        let rec = params.reconstruct(store, img).expect("sizes match");
        total += img.l1(&rec);
    }
    total / images.len() as f64
}

/// Map config -> metadata echo for the checkpoint container.
pub fn codec_config_map(cfg: &CodecConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("codec_book".into(), cfg.book.to_string());
    m.insert("codec_dim".into(), cfg.dim.to_string());
    m.insert("codec_patch".into(), cfg.patch.to_string());
    m.insert("codec_hidden".into(), cfg.hidden.to_string());
    m.insert("image".into(), cfg.image.to_string());
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_data::{gen_dataset, render, Split};

    #[test]
    fn quantize_matches_inspection_and_tie_break() {
        let book = Tensor::from_vec(2, 2, vec![0.0, 0.0, 1.0, 1.0]);
        let (id, e) = quantize(&[0.1, 0.2], &book).unwrap();
        assert_eq!(id, 0);
        assert_eq!(e, vec![0.0, 0.0]);
        // exactly equidistant -> lowest index
        let (id, _) = quantize(&[0.5, 0.5], &book).unwrap();
        assert_eq!(id, 0);
        assert_eq!(quantize(&[f64::NAN, 0.0], &book), Err(CodecError::NonFinite));
    }

    #[test]
    fn quantize_agrees_with_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let book = Tensor::randn(64, 8, 1.0, &mut rng);
        for _ in 0..10_000 {
            let z: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (id, _) = quantize(&z, &book).unwrap();
            // independent brute-force scan
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for r in 0..book.rows {
                let mut d = 0.0;
                for c in 0..book.cols {
                    let diff = book.at(r, c) - z[c];
                    d += diff * diff;
                }
                if d < best_d {
                    best_d = d;
                    best = r;
                }
            }
            assert_eq!(id, best);
        }
    }

    #[test]
    fn token_count_is_fixed_by_geometry() {
        let cfg = CodecConfig::default();
        assert_eq!(cfg.tokens_per_image(), 64);
        let mut store = ParamStore::new();
        let params = CodecParams::init(&mut store, cfg, 5);
        let img = render(&gen_dataset(1, 3, Split::Train)[0].scene);
        let ids = params.encode_image(&store, &img).unwrap();
        assert_eq!(ids.len(), 64);
        // deterministic
        assert_eq!(ids, params.encode_image(&store, &img).unwrap());
    }

    #[test]
    fn wrong_image_size_rejected() {
        let mut store = ParamStore::new();
        let params = CodecParams::init(&mut store, CodecConfig::default(), 5);
        let img = Image::solid(16, [0, 0, 0]);
        assert!(matches!(
            params.encode_image(&store, &img),
            Err(CodecError::ImageSize { got: 16, want: 32 })
        ));
        assert!(matches!(
            params.decode_tokens(&store, &[0; 10]),
            Err(CodecError::TokenCount { got: 10, want: 64 })
        ));
    }

    #[test]
    fn commitment_loss_zero_when_already_quantized() {
        let mut store = ParamStore::new();
        let params = CodecParams::init(&mut store, CodecConfig::default(), 5);
        // Set z = book row exactly by crafting a batch through the graph is
        // awkward; instead check the loss algebra directly on nodes.
        let book = store.value(params.book).clone();
        let mut g = Graph::new();
        let z = g.leaf(Tensor::from_vec(2, book.cols, {
            let mut v = book.row(3).to_vec();
            v.extend_from_slice(book.row(7));
            v
        }));
        let (q, ids) = g.st_quantize(z, &book);
        assert_eq!(ids, vec![3, 7]);
        let picked_sg = g.detach(q);
        let commit = g.mse(z, picked_sg);
        assert_eq!(g.value(commit).item(), 0.0);
    }

    #[test]
    fn training_reduces_smoothed_loss_and_counts_usage() {
        let data = gen_dataset(64, 11, Split::Train);
        let images: Vec<Image> = data.iter().map(|s| render(&s.scene)).collect();
        let mut store = ParamStore::new();
        let cfg = CodecConfig { book: 64, dim: 16, hidden: 32, ..CodecConfig::default() };
        let params = CodecParams::init(&mut store, cfg, 5);
        let out = train_codec(&mut store, &params, &images, 100, 8, 2e-3, 7);
        assert_eq!(out.log.len(), 100);
        assert!(out.log.iter().all(|e| e.loss.is_finite()));
        let early: f64 = out.log[..20].iter().map(|e| e.loss).sum::<f64>() / 20.0;
        let late: f64 = out.log[80..].iter().map(|e| e.loss).sum::<f64>() / 20.0;
        assert!(late < early, "smoothed loss should fall: {early} -> {late}");
        // usage histogram counts every quantized patch
        let total: u64 = out.usage.iter().sum();
        assert_eq!(total, 100 * 8 * 64);
    }
}
