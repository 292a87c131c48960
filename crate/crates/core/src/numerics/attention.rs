//! Multi-head scaled dot-product attention over sparse key sets.
//!
//! Each query row attends to its own list of key rows, which covers dense
//! masked attention, neighbor attention over variable neighbor counts and
//! box-local temporal attention with one kernel. A query with an empty key
//! list produces a zero output row.

/// Compressed list of key indices per query row.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeySets {
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl KeySets {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            indices: Vec::new(),
        }
    }

    pub fn push_query<I: IntoIterator<Item = usize>>(&mut self, keys: I) {
        self.indices.extend(keys);
        self.offsets.push(self.indices.len());
    }

    pub fn from_lists<L: AsRef<[usize]>>(lists: &[L]) -> Self {
        let mut s = Self::new();
        for l in lists {
            s.push_query(l.as_ref().iter().copied());
        }
        s
    }

    /// Every query sees every key.
    pub fn dense(queries: usize, keys: usize) -> Self {
        let mut s = Self::new();
        for _ in 0..queries {
            s.push_query(0..keys);
        }
        s
    }

    /// Keys allowed where `mask[q * keys + k]` is true.
    pub fn from_mask(mask: &[bool], queries: usize, keys: usize) -> Self {
        let mut s = Self::new();
        for q in 0..queries {
            s.push_query((0..keys).filter(|&k| mask[q * keys + k]));
        }
        s
    }

    pub fn num_queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_edges(&self) -> usize {
        self.indices.len()
    }

    pub fn keys(&self, query: usize) -> &[usize] {
        &self.indices[self.offsets[query]..self.offsets[query + 1]]
    }

    pub fn max_key(&self) -> Option<usize> {
        self.indices.iter().copied().max()
    }

    pub(crate) fn offset(&self, query: usize) -> usize {
        self.offsets[query]
    }
}

/// Layout of attention probabilities saved by the forward pass: for query
/// `r`, head `h` and key slot `l`, the weight lives at
/// `heads * offset(r) + h * len(r) + l`.
pub(crate) fn weight_index(keys: &KeySets, heads: usize, r: usize, h: usize, l: usize) -> usize {
    heads * keys.offset(r) + h * keys.keys(r).len() + l
}

pub(crate) struct AttentionDims {
    pub nq: usize,
    pub dk: usize,
    pub dv: usize,
    pub heads: usize,
}

/// Forward pass. Returns (output `nq x dv`, saved weights).
pub(crate) fn forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    keys: &KeySets,
    dims: &AttentionDims,
) -> (Vec<f64>, Vec<f64>) {
    let AttentionDims { nq, dk, dv, heads } = *dims;
    let hk = dk / heads;
    let hv = dv / heads;
    let scale = 1.0 / (hk as f64).sqrt();
    let mut out = vec![0.0; nq * dv];
    let mut weights = vec![0.0; heads * keys.num_edges()];
    let mut logits = Vec::new();
    for r in 0..nq {
        let ks = keys.keys(r);
        if ks.is_empty() {
            continue;
        }
        for h in 0..heads {
            let qh = &q[r * dk + h * hk..r * dk + (h + 1) * hk];
            logits.clear();
            for &j in ks {
                let kh = &k[j * dk + h * hk..j * dk + (h + 1) * hk];
                let dot: f64 = qh.iter().zip(kh).map(|(a, b)| a * b).sum();
                logits.push(dot * scale);
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                total += *l;
            }
            let base = weight_index(keys, heads, r, h, 0);
            let orow = &mut out[r * dv + h * hv..r * dv + (h + 1) * hv];
            for (slot, (&j, &e)) in ks.iter().zip(logits.iter()).enumerate() {
                let w = e / total;
                weights[base + slot] = w;
                let vh = &v[j * dv + h * hv..j * dv + (h + 1) * hv];
                for (o, x) in orow.iter_mut().zip(vh) {
                    *o += w * x;
                }
            }
        }
    }
    (out, weights)
}

pub(crate) struct AttentionGrads<'a> {
    pub dq: Option<&'a mut [f64]>,
    pub dk: Option<&'a mut [f64]>,
    pub dv: Option<&'a mut [f64]>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    keys: &KeySets,
    dims: &AttentionDims,
    weights: &[f64],
    dout: &[f64],
    mut grads: AttentionGrads<'_>,
) {
    let AttentionDims { nq, dk, dv, heads } = *dims;
    let hk = dk / heads;
    let hv = dv / heads;
    let scale = 1.0 / (hk as f64).sqrt();
    let mut dw = Vec::new();
    for r in 0..nq {
        let ks = keys.keys(r);
        if ks.is_empty() {
            continue;
        }
        for h in 0..heads {
            let base = weight_index(keys, heads, r, h, 0);
            let w = &weights[base..base + ks.len()];
            let go = &dout[r * dv + h * hv..r * dv + (h + 1) * hv];
            dw.clear();
            for (slot, &j) in ks.iter().enumerate() {
                let vh = &v[j * dv + h * hv..j * dv + (h + 1) * hv];
                dw.push(go.iter().zip(vh).map(|(a, b)| a * b).sum::<f64>());
                if let Some(dvb) = grads.dv.as_deref_mut() {
                    let dst = &mut dvb[j * dv + h * hv..j * dv + (h + 1) * hv];
                    for (d, g) in dst.iter_mut().zip(go) {
                        *d += w[slot] * g;
                    }
                }
            }
            let inner: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            let qh = &q[r * dk + h * hk..r * dk + (h + 1) * hk];
            for (slot, &j) in ks.iter().enumerate() {
                let dlogit = w[slot] * (dw[slot] - inner) * scale;
                if dlogit == 0.0 {
                    continue;
                }
                let kh = &k[j * dk + h * hk..j * dk + (h + 1) * hk];
                if let Some(dqb) = grads.dq.as_deref_mut() {
                    let dst = &mut dqb[r * dk + h * hk..r * dk + (h + 1) * hk];
                    for (d, x) in dst.iter_mut().zip(kh) {
                        *d += dlogit * x;
                    }
                }
                if let Some(dkb) = grads.dk.as_deref_mut() {
                    let dst = &mut dkb[j * dk + h * hk..j * dk + (h + 1) * hk];
                    for (d, x) in dst.iter_mut().zip(qh) {
                        *d += dlogit * x;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_builder_skips_disallowed() {
        let ks = KeySets::from_mask(&[true, false, true, false, false, false], 2, 3);
        assert_eq!(ks.keys(0), &[0, 2]);
        assert!(ks.keys(1).is_empty());
        assert_eq!(ks.num_edges(), 2);
    }
}
