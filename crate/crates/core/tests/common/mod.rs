//! Loop-based reference forward pass, written without the tape.

#![allow(dead_code)]

use depthgrow_core::{DepthGrowModel, Float};

pub type Mat = Vec<Vec<f64>>;

pub struct Reference<'a, F: Float> {
    pub model: &'a DepthGrowModel<F>,
    pub d: usize,
    pub heads: usize,
}

impl<'a, F: Float> Reference<'a, F> {
    pub fn new(model: &'a DepthGrowModel<F>) -> Self {
        let c = model.config();
        Reference {
            model,
            d: c.d_model,
            heads: c.n_heads,
        }
    }

    fn p(&self, name: &str) -> (Vec<usize>, Vec<f64>) {
        let p = self
            .model
            .store()
            .by_name(name)
            .unwrap_or_else(|| panic!("no parameter {name}"));
        (
            p.tensor.shape().to_vec(),
            p.tensor.data().iter().map(|v| v.as_f64()).collect(),
        )
    }

    fn vecmat(&self, x: &[f64], name: &str) -> Vec<f64> {
        let (s, w) = self.p(name);
        let (r, c) = (s[0], s[1]);
        assert_eq!(x.len(), r);
        let mut out = vec![0.0; c];
        for j in 0..c {
            for i in 0..r {
                out[j] += x[i] * w[i * c + j];
            }
        }
        out
    }

    pub fn embed(&self, ids: &[u32]) -> Mat {
        let (_, e) = self.p("embed.tokens");
        let d = self.d;
        ids.iter()
            .enumerate()
            .map(|(pos, &id)| {
                (0..d)
                    .map(|i| {
                        let k = (i / 2) as f64;
                        let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
                        let pe = if i % 2 == 0 { angle.sin() } else { angle.cos() };
                        e[id as usize * d + i] * (d as f64).sqrt() + pe
                    })
                    .collect()
            })
            .collect()
    }

    pub fn ln(&self, x: &Mat, prefix: &str) -> Mat {
        let (_, g) = self.p(&format!("{prefix}.gain"));
        let (_, b) = self.p(&format!("{prefix}.bias"));
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j])
                    .collect()
            })
            .collect()
    }

    /// Multi-head attention; `key_pad[j]` hides key `j`.
    pub fn mha(
        &self,
        prefix: &str,
        queries: &Mat,
        memory: &Mat,
        causal: bool,
        key_pad: &[bool],
    ) -> Mat {
        let q: Mat = queries
            .iter()
            .map(|x| self.vecmat(x, &format!("{prefix}.wq")))
            .collect();
        let k: Mat = memory
            .iter()
            .map(|x| self.vecmat(x, &format!("{prefix}.wk")))
            .collect();
        let v: Mat = memory
            .iter()
            .map(|x| self.vecmat(x, &format!("{prefix}.wv")))
            .collect();
        let dk = self.d / self.heads;
        let mut ctx = vec![vec![0.0; self.d]; queries.len()];
        for h in 0..self.heads {
            let cols = h * dk..(h + 1) * dk;
            for i in 0..queries.len() {
                let visible: Vec<usize> = (0..memory.len())
                    .filter(|&j| !key_pad[j] && (!causal || j <= i))
                    .collect();
                if visible.is_empty() {
                    continue;
                }
                let scores: Vec<f64> = visible
                    .iter()
                    .map(|&j| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (n, &j) in visible.iter().enumerate() {
                    let a = (scores[n] - m).exp() / z;
                    for c in cols.clone() {
                        ctx[i][c] += a * v[j][c];
                    }
                }
            }
        }
        ctx.iter()
            .map(|x| self.vecmat(x, &format!("{prefix}.wo")))
            .collect()
    }

    pub fn ffn(&self, x: &Mat, prefix: &str) -> Mat {
        let (_, b1) = self.p(&format!("{prefix}.b1"));
        let (_, b2) = self.p(&format!("{prefix}.b2"));
        x.iter()
            .map(|row| {
                let h: Vec<f64> = self
                    .vecmat(row, &format!("{prefix}.w1"))
                    .iter()
                    .zip(&b1)
                    .map(|(a, b)| (a + b).max(0.0))
                    .collect();
                self.vecmat(&h, &format!("{prefix}.w2"))
                    .iter()
                    .zip(&b2)
                    .map(|(a, b)| a + b)
                    .collect()
            })
            .collect()
    }

    pub fn encoder(&self, prefix: &str, blocks: usize, x: &Mat, pad: &[bool]) -> Mat {
        let mut x = x.clone();
        for i in 0..blocks {
            let p = format!("{prefix}.{i}");
            let h = self.ln(&x, &format!("{p}.ln_self"));
            x = add(&x, &self.mha(&format!("{p}.self_attn"), &h, &h, false, pad));
            let h = self.ln(&x, &format!("{p}.ln_ff"));
            x = add(&x, &self.ffn(&h, &format!("{p}.ffn")));
        }
        self.ln(&x, &format!("{prefix}.final_ln"))
    }

    pub fn decoder(
        &self,
        prefix: &str,
        blocks: usize,
        y: &Mat,
        memory: &Mat,
        memory_pad: &[bool],
    ) -> Mat {
        let mut y = y.clone();
        let none = vec![false; y.len()];
        for i in 0..blocks {
            let p = format!("{prefix}.{i}");
            let h = self.ln(&y, &format!("{p}.ln_self"));
            y = add(
                &y,
                &self.mha(&format!("{p}.self_attn"), &h, &h, true, &none),
            );
            let h = self.ln(&y, &format!("{p}.ln_cross"));
            y = add(
                &y,
                &self.mha(&format!("{p}.cross_attn"), &h, memory, false, memory_pad),
            );
            let h = self.ln(&y, &format!("{p}.ln_ff"));
            y = add(&y, &self.ffn(&h, &format!("{p}.ffn")));
        }
        self.ln(&y, &format!("{prefix}.final_ln"))
    }

    pub fn project(&self, s: &Mat) -> Mat {
        s.iter()
            .map(|row| self.vecmat(row, "output_proj"))
            .collect()
    }

    /// `(h1, h2, s1, s2, logits_S, logits_D)` for one unpadded pair.
    pub fn grown(&self, src: &[u32], tgt_in: &[u32]) -> [Mat; 6] {
        let c = self.model.config();
        let (n, m) = (c.n_bottom_blocks, c.n_top_blocks);
        let sp = vec![false; src.len()];
        let x = self.embed(src);
        let y = self.embed(tgt_in);
        let h1 = self.encoder("bottom.enc", n, &x, &sp);
        let h2 = self.encoder("top.enc", m, &add(&x, &h1), &sp);
        let s1 = self.decoder("bottom.dec", n, &y, &h1, &sp);
        let s2 = self.decoder("top.dec", m, &add(&y, &s1), &h2, &sp);
        let ls = self.project(&s1);
        let ld = self.project(&s2);
        [h1, h2, s1, s2, ls, ld]
    }
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn max_abs_diff<F: Float>(t: &depthgrow_core::Tensor<F>, m: &Mat) -> f64 {
    let cols = m[0].len();
    assert_eq!(t.numel(), m.len() * cols);
    t.data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v.as_f64() - m[i / cols][i % cols]).abs())
        .fold(0.0, f64::max)
}
