use rand::Rng;

use super::params::{Bound, ParamStore};
use super::ConvLayer;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Spatial kernel sizes of the three residual-path convolutions.
pub const BOTTLENECK_KERNELS: [usize; 3] = [1, 3, 1];

/// Residual bottleneck unit over `[C × H × W]` inputs:
/// `relu(conv1x1 → relu → conv3x3 → relu → conv1x1 + skip)`.
///
/// The 3×3 stage is zero-padded by one pixel so that, at stride 1, the main
/// path preserves spatial size. A 1×1 projection replaces the identity skip
/// whenever channels or stride change.
#[derive(Debug, Clone)]
pub struct BottleneckBlock {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    reduce: ConvLayer,
    spatial: ConvLayer,
    expand: ConvLayer,
    projection: Option<ConvLayer>,
}

impl BottleneckBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        mid_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let [k1, k3, k1b] = BOTTLENECK_KERNELS;
        let reduce = ConvLayer::new(store, &format!("{name}.conv1"), in_channels, mid_channels, &[k1, k1], &[1, 1], 0, false, rng)?;
        let spatial = ConvLayer::new(store, &format!("{name}.conv2"), mid_channels, mid_channels, &[k3, k3], &[stride, stride], 1, false, rng)?;
        let expand = ConvLayer::new(store, &format!("{name}.conv3"), mid_channels, out_channels, &[k1b, k1b], &[1, 1], 0, false, rng)?;
        let projection = if in_channels != out_channels || stride != 1 {
            Some(ConvLayer::new(store, &format!("{name}.proj"), in_channels, out_channels, &[1, 1], &[stride, stride], 0, false, rng)?)
        } else {
            None
        };
        Ok(Self {
            in_channels,
            mid_channels,
            out_channels,
            stride,
            reduce,
            spatial,
            expand,
            projection,
        })
    }

    pub fn kernel_sizes(&self) -> [usize; 3] {
        [self.reduce.kernel_size[0], self.spatial.kernel_size[0], self.expand.kernel_size[0]]
    }

    pub fn has_projection(&self) -> bool {
        self.projection.is_some()
    }

    pub fn convs(&self) -> impl Iterator<Item = &ConvLayer> {
        [&self.reduce, &self.spatial, &self.expand]
            .into_iter()
            .chain(self.projection.as_ref())
    }

    /// Output spatial extent for an input extent `n`.
    pub fn output_extent(&self, n: usize) -> usize {
        (n + 2 - 3) / self.stride + 1
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, input: Var) -> Result<Var> {
        let shape = tape.value(input).shape();
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(Error::Dimension {
                op: "bottleneck",
                lhs: shape.to_vec(),
                rhs: vec![self.in_channels],
            });
        }
        let a = self.reduce.forward(tape, bound, input)?;
        let a = tape.relu(a)?;
        let b = self.spatial.forward(tape, bound, a)?;
        let b = tape.relu(b)?;
        let main = self.expand.forward(tape, bound, b)?;
        let skip = match &self.projection {
            Some(p) => p.forward(tape, bound, input)?,
            None => input,
        };
        let sum = tape.add(main, skip)?;
        tape.relu(sum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{relative_error, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_weights_with_identity_skip_is_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let block = BottleneckBlock::new(&mut store, "b", 4, 2, 4, 1, &mut rng).unwrap();
        assert!(!block.has_projection());
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let x = random_image(&mut rng, &[4, 5, 5]);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let y = block.forward(&mut tape, &bound, xv).unwrap();
        assert_eq!(tape.value(y), &x.map(|v| v.max(0.0)));
    }

    #[test]
    fn kernel_sizes_are_one_three_one() {
        let mut store = ParamStore::new();
        let block = BottleneckBlock::new(&mut store, "b", 3, 2, 5, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(block.kernel_sizes(), [1, 3, 1]);
        assert!(block.has_projection());
    }

    #[test]
    fn output_matches_skip_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (cin, mid, cout) = (rng.random_range(1..5), rng.random_range(1..4), rng.random_range(1..6));
            let stride = rng.random_range(1..=2);
            let side = rng.random_range(1..8);
            let mut store = ParamStore::new();
            let block = BottleneckBlock::new(&mut store, "b", cin, mid, cout, stride, &mut rng).unwrap();
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape).unwrap();
            let x = tape.constant(random_image(&mut rng, &[cin, side, side])).unwrap();
            let y = block.forward(&mut tape, &bound, x).unwrap();
            let expected = block.output_extent(side);
            assert_eq!(tape.value(y).shape(), &[cout, expected, expected]);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let block = BottleneckBlock::new(&mut store, "b", 3, 2, 3, 1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let x = tape.constant(Tensor::zeros(&[2, 4, 4])).unwrap();
        assert!(matches!(block.forward(&mut tape, &bound, x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::new();
        let block = BottleneckBlock::new(&mut store, "b", 2, 3, 4, 2, &mut rng).unwrap();
        let x = random_image(&mut rng, &[2, 5, 5]);
        let readout = random_image(&mut rng, &[4, 3, 3]);
        let eval = |store: &ParamStore, want_grads: bool| -> (f64, Vec<Tensor>) {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape).unwrap();
            let xv = tape.constant(x.clone()).unwrap();
            let y = block.forward(&mut tape, &bound, xv).unwrap();
            let r = tape.constant(readout.clone()).unwrap();
            let prod = tape.mul(y, r).unwrap();
            let s = tape.sum(prod).unwrap();
            let grads = if want_grads {
                let g = tape.backward(s).unwrap();
                store.collect_grads(&tape, &bound, &g)
            } else {
                Vec::new()
            };
            (tape.value(s).item().unwrap(), grads)
        };
        let (_, grads) = eval(&store, true);
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for id in store.ids().collect::<Vec<_>>() {
            for i in 0..store.get(id).len() {
                let orig = store.get(id).data()[i];
                store.get_mut(id).data_mut()[i] = orig + eps;
                let plus = eval(&store, false).0;
                store.get_mut(id).data_mut()[i] = orig - eps;
                let minus = eval(&store, false).0;
                store.get_mut(id).data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                worst = worst.max(relative_error(grads[id.index()].data()[i], numeric));
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }
}
