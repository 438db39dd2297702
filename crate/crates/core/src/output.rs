//! Fusion of the two branches, per-query decoding and the seasonal bias.

use rand::Rng;

use crate::error::{Error, Result};
use crate::local_time::TimeEmbedding;
use crate::nn::{Mlp, ParamStore};
use crate::tensor::{Graph, NodeId, Tensor};

pub const LAMBDA_FUSION: &str = "output.lambda_fusion";
pub const LAMBDA_SEASONAL: &str = "output.lambda_s";

/// Learnable scalars of the output stage, both starting at 1.
pub fn init_scalars(store: &mut ParamStore) {
    store.insert(LAMBDA_FUSION, Tensor::ones([1]));
    store.insert(LAMBDA_SEASONAL, Tensor::ones([1]));
}

/// `h_time + λ · h_freq`.
pub fn fuse(g: &mut Graph, h_time: NodeId, h_freq: NodeId, lambda: NodeId) -> Result<NodeId> {
    if g.shape(h_time) != g.shape(h_freq) {
        return Err(Error::Shape(format!(
            "fuse: h_time {:?} vs h_freq {:?}",
            g.shape(h_time),
            g.shape(h_freq)
        )));
    }
    let scaled = g.mul(h_freq, lambda)?;
    g.add(h_time, scaled)
}

/// Shared MLP `[h_joint[n] ‖ φ(q)] → scalar`.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub mlp: Mlp,
}

impl Decoder {
    pub const PREFIX: &'static str = "output.decoder";

    pub fn named() -> Self {
        Self {
            mlp: Mlp::named(Self::PREFIX),
        }
    }

    pub fn init(store: &mut ParamStore, d_model: usize, time_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp::init(store, Self::PREFIX, d_model + time_dim, d_model, 1, rng),
        }
    }

    /// `h_joint: [B, N, D]`, `queries: [B, N, Q]` (normalized time); returns
    /// the base forecast `[B, N, Q]` in normalized units.
    pub fn apply(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        embed: &TimeEmbedding,
        h_joint: NodeId,
        queries: NodeId,
    ) -> Result<NodeId> {
        let (b, n, d) = match g.shape(h_joint) {
            [b, n, d] => (*b, *n, *d),
            s => return Err(Error::Shape(format!("decode: h_joint {s:?}"))),
        };
        let q = match g.shape(queries) {
            [qb, qn, q] if (*qb, *qn) == (b, n) => *q,
            s => return Err(Error::Shape(format!("decode: h_joint {:?} vs queries {s:?}", [b, n, d]))),
        };
        let t = g.reshape(queries, &[b, n, q, 1])?;
        let phi = embed.apply(g, store, t)?;
        let h = g.reshape(h_joint, &[b, n, 1, d])?;
        let h = g.broadcast_to(h, &[b, n, q, d])?;
        let z = g.concat(&[h, phi], 3)?;
        let out = self.mlp.apply(g, store, z)?;
        g.reshape(out, &[b, n, q])
    }
}

/// `(base + λ_s · bias) · std + mean`; `mean` and `std` are `[B, N, 1]`.
pub fn compose_prediction(
    g: &mut Graph,
    base: NodeId,
    bias: Option<(NodeId, NodeId)>,
    mean: &Tensor,
    std: &Tensor,
) -> Result<NodeId> {
    let normalized = match bias {
        Some((bias, lambda)) => {
            let scaled = g.mul(bias, lambda)?;
            g.add(base, scaled)?
        }
        None => base,
    };
    let std = g.constant(std.clone());
    let mean = g.constant(mean.clone());
    let scaled = g.mul(normalized, std)?;
    g.add(scaled, mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fuse_endpoints() {
        let mut g = Graph::new();
        let ht = g.constant(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
        let hf = g.constant(Tensor::new([1, 2], vec![-3.0, 5.0]).unwrap());
        let zero = g.scalar(0.0);
        let one = g.scalar(1.0);
        let a = fuse(&mut g, ht, hf, zero).unwrap();
        let z = g.constant(Tensor::zeros([1, 2]));
        let b = fuse(&mut g, z, hf, one).unwrap();
        g.evaluate(&ParamStore::new()).unwrap();
        assert_eq!(g.value(a).unwrap().data(), &[1.0, 2.0]);
        assert_eq!(g.value(b).unwrap().data(), &[-3.0, 5.0]);
        let bad = g.constant(Tensor::zeros([2, 2]));
        assert!(fuse(&mut g, ht, bad, one).is_err());
    }

    fn decoder_setup() -> (ParamStore, TimeEmbedding, Decoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let emb = TimeEmbedding::init(&mut store, 4).unwrap();
        let dec = Decoder::init(&mut store, 6, 4, &mut rng);
        (store, emb, dec)
    }

    #[test]
    fn decode_shape_and_repeated_queries() {
        let (store, emb, dec) = decoder_setup();
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_fn([1, 5, 6], |i| (i as f64 * 0.37).sin()));
        let q = g.constant(Tensor::from_fn([1, 5, 3], |i| if i % 3 == 2 { 1.1 } else { 1.0 + 0.05 * (i / 3) as f64 }));
        let out = dec.apply(&mut g, &store, &emb, h, q).unwrap();
        let v = g.forward(&store, out).unwrap();
        assert_eq!(v.shape(), &[1, 5, 3]);
        // The first two queries of variable 0 share a timestamp.
        assert_eq!(v.data()[0], v.data()[1]);
    }

    #[test]
    fn compose_is_affine() {
        let mut g = Graph::new();
        let base = g.constant(Tensor::new([1, 1, 1], vec![0.4]).unwrap());
        let bias = g.constant(Tensor::new([1, 1, 1], vec![0.6]).unwrap());
        let one = g.scalar(1.0);
        let mean = Tensor::full([1, 1, 1], 2.0);
        let std = Tensor::full([1, 1, 1], 3.0);
        let out = compose_prediction(&mut g, base, Some((bias, one)), &mean, &std).unwrap();
        assert_eq!(g.forward(&ParamStore::new(), out).unwrap().item(), 5.0);

        let mut g = Graph::new();
        let base = g.constant(Tensor::new([1, 1, 2], vec![0.0, 0.0]).unwrap());
        let bias = g.constant(Tensor::new([1, 1, 2], vec![0.25, -1.5]).unwrap());
        let one = g.scalar(1.0);
        let ident = (Tensor::zeros([1, 1, 1]), Tensor::ones([1, 1, 1]));
        let out = compose_prediction(&mut g, base, Some((bias, one)), &ident.0, &ident.1).unwrap();
        assert_eq!(g.forward(&ParamStore::new(), out).unwrap().data(), &[0.25, -1.5]);
    }
}
