//! Plain f64 re-implementation of the caption model's feature-input forward
//! pass and teacher-forced loss, written from the architecture description
//! rather than the library code.

use std::cell::RefCell;
use std::collections::BTreeMap;

use capgen_core::params::ParamStore;
use capgen_core::transformer::ModelConfig;

#[derive(Clone, Debug)]
pub struct M {
    pub r: usize,
    pub c: usize,
    pub d: Vec<f64>,
}

impl M {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.c + j]
    }

    fn mul(&self, o: &M) -> M {
        assert_eq!(self.c, o.r);
        let mut d = vec![0.0; self.r * o.c];
        for i in 0..self.r {
            for j in 0..o.c {
                d[i * o.c + j] = (0..self.c).map(|k| self.at(i, k) * o.at(k, j)).sum();
            }
        }
        M { r: self.r, c: o.c, d }
    }

    fn plus(&self, o: &M) -> M {
        M { r: self.r, c: self.c, d: self.d.iter().zip(&o.d).map(|(a, b)| a + b).collect() }
    }

    fn plus_row(&self, b: &[f64]) -> M {
        M { r: self.r, c: self.c, d: self.d.iter().enumerate().map(|(i, x)| x + b[i % self.c]).collect() }
    }

    fn rows(&self, n: usize) -> M {
        M { r: n, c: self.c, d: self.d[..n * self.c].to_vec() }
    }

    fn t(&self) -> M {
        let mut d = vec![0.0; self.r * self.c];
        for i in 0..self.r {
            for j in 0..self.c {
                d[j * self.r + i] = self.at(i, j);
            }
        }
        M { r: self.c, c: self.r, d }
    }
}

pub type Params = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

/// `(source, values)` per encoder position.
pub type Features = Vec<(String, Vec<f64>)>;

pub fn params_f64(store: &ParamStore) -> Params {
    store.iter().map(|(k, t)| (k.clone(), (t.shape().to_vec(), t.data().iter().map(|&x| x as f64).collect()))).collect()
}

pub struct Replica<'a> {
    pub cfg: &'a ModelConfig,
    pub p: &'a Params,
    /// Every ReLU input seen so far, in evaluation order.
    pub relu_inputs: RefCell<Vec<f64>>,
}

impl<'a> Replica<'a> {
    pub fn new(cfg: &'a ModelConfig, p: &'a Params) -> Self {
        Replica { cfg, p, relu_inputs: RefCell::new(Vec::new()) }
    }

    fn m(&self, name: &str) -> M {
        let (s, d) = &self.p[name];
        M { r: s[0], c: s[1], d: d.clone() }
    }

    fn v(&self, name: &str) -> &[f64] {
        &self.p[name].1
    }

    fn layer_norm(&self, x: &M, pfx: &str) -> M {
        let (g, b) = (self.v(&format!("{pfx}g")), self.v(&format!("{pfx}b")));
        let mut d = Vec::with_capacity(x.d.len());
        for i in 0..x.r {
            let row = &x.d[i * x.c..(i + 1) * x.c];
            let mu = row.iter().sum::<f64>() / x.c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / x.c as f64;
            for (j, v) in row.iter().enumerate() {
                d.push((v - mu) / (var + 1e-5).sqrt() * g[j] + b[j]);
            }
        }
        M { r: x.r, c: x.c, d }
    }

    fn mha(&self, pfx: &str, xq: &M, xkv: &M, causal: bool) -> M {
        let dk = self.cfg.d_model / self.cfg.h;
        let mut heads = Vec::new();
        for i in 0..self.cfg.h {
            let q = xq.mul(&self.m(&format!("{pfx}wq.{i}")));
            let k = xkv.mul(&self.m(&format!("{pfx}wk.{i}")));
            let v = xkv.mul(&self.m(&format!("{pfx}wv.{i}")));
            let mut s = q.mul(&k.t());
            for a in 0..s.r {
                for b in 0..s.c {
                    let mut x = s.at(a, b) / (dk as f64).sqrt();
                    if causal && b > a {
                        x += -1e9;
                    }
                    s.d[a * s.c + b] = x;
                }
            }
            for a in 0..s.r {
                let row = &mut s.d[a * s.c..(a + 1) * s.c];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
                for x in row.iter_mut() {
                    *x = (*x - mx).exp() / z;
                }
            }
            heads.push(s.mul(&v));
        }
        let mut cat = M { r: xq.r, c: dk * self.cfg.h, d: vec![0.0; xq.r * dk * self.cfg.h] };
        for (hi, h) in heads.iter().enumerate() {
            for a in 0..h.r {
                for b in 0..dk {
                    cat.d[a * cat.c + hi * dk + b] = h.at(a, b);
                }
            }
        }
        cat.mul(&self.m(&format!("{pfx}wo")))
    }

    fn ffn(&self, pfx: &str, x: &M) -> M {
        let mut h = x.mul(&self.m(&format!("{pfx}w1"))).plus_row(self.v(&format!("{pfx}b1")));
        let mut seen = self.relu_inputs.borrow_mut();
        for v in h.d.iter_mut() {
            seen.push(*v);
            *v = v.max(0.0);
        }
        h.mul(&self.m(&format!("{pfx}w2"))).plus_row(self.v(&format!("{pfx}b2")))
    }

    pub fn encode(&self, feats: &[(String, Vec<f64>)]) -> M {
        let d = self.cfg.d_model;
        let mut x = M { r: feats.len(), c: d, d: Vec::new() };
        for (src, f) in feats {
            let row = M { r: 1, c: f.len(), d: f.clone() };
            let p = row.mul(&self.m(&format!("src.{src}.w"))).plus_row(self.v(&format!("src.{src}.b")));
            x.d.extend(p.d);
        }
        x = x.plus(&self.m("pos_emb").rows(feats.len()));
        for l in 0..self.cfg.layers_enc {
            let a = self.mha(&format!("enc.{l}.attn."), &x, &x, false);
            let x1 = self.layer_norm(&x.plus(&a), &format!("enc.{l}.ln1."));
            let f = self.ffn(&format!("enc.{l}.ff."), &x1);
            x = self.layer_norm(&x1.plus(&f), &format!("enc.{l}.ln2."));
        }
        x
    }

    pub fn logits(&self, ids: &[u32], memory: &M) -> M {
        let d = self.cfg.d_model;
        let tok = self.m("tok_emb");
        let mut x = M { r: ids.len(), c: d, d: Vec::new() };
        for &t in ids {
            x.d.extend_from_slice(&tok.d[t as usize * d..(t as usize + 1) * d]);
        }
        x = x.plus(&self.m("pos_emb").rows(ids.len()));
        for l in 0..self.cfg.layers_dec {
            let a = self.mha(&format!("dec.{l}.self."), &x, &x, true);
            let x1 = self.layer_norm(&x.plus(&a), &format!("dec.{l}.ln1."));
            let c = self.mha(&format!("dec.{l}.cross."), &x1, memory, false);
            let x2 = self.layer_norm(&x1.plus(&c), &format!("dec.{l}.ln2."));
            let f = self.ffn(&format!("dec.{l}.ff."), &x2);
            x = self.layer_norm(&x2.plus(&f), &format!("dec.{l}.ln3."));
        }
        x.mul(&self.m("out.w")).plus_row(self.v("out.b"))
    }

    /// Mean token cross-entropy over a batch of `(features, full ids)` where
    /// the decoder sees `ids[..n-1]` and predicts `ids[1..]`.
    pub fn batch_loss(&self, batch: &[(Features, Vec<u32>)]) -> f64 {
        let mut total = 0.0;
        let mut count = 0;
        for (feats, ids) in batch {
            let mem = self.encode(feats);
            let lg = self.logits(&ids[..ids.len() - 1], &mem);
            for (pos, &t) in ids[1..].iter().enumerate() {
                let row = &lg.d[pos * lg.c..(pos + 1) * lg.c];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
                total += lse - row[t as usize];
                count += 1;
            }
        }
        total / count as f64
    }
}
