//! Whole-volume segmentation: preprocessing, initialization slice,
//! bidirectional propagation and assembly of the 3D mask.

mod preprocess;

use std::ops::RangeInclusive;

pub use preprocess::{
    normalize_intensity, preprocess, preprocess_pair, resample_isotropic, resample_isotropic_to,
    resample_mask_like, IN_PLANE_EXTENT, TARGET_SPACING_MM,
};

use crate::error::{invalid, shape_err, Result};
use crate::networks::{
    forward_inference, ModelParameters, NetworkKind, PropagationInput, LOOKAHEAD,
};
use crate::tensor::Tensor;
use crate::training::Direction;
use crate::volume::{BinaryMask, Grid3, ProbabilityMask, Volume};

pub const BINARY_THRESHOLD: f32 = 0.5;

/// Produces the initialization mask for one slice.
pub trait SlicePredictor {
    fn predict_slice(&mut self, z: usize, slice: &[f32], extent: usize) -> Result<Vec<f32>>;
}

/// One propagation step: the anchor, its mask and the slices after it.
pub struct Window<'a> {
    pub anchor: usize,
    /// Volume indices of the lookahead slices, nearest first.
    pub lookahead: [usize; LOOKAHEAD],
    pub input: &'a PropagationInput<f32>,
}

/// Predicts the masks of a window's lookahead slices, nearest first.
pub trait WindowPredictor {
    fn predict_window(&mut self, window: &Window<'_>) -> Result<Vec<Vec<f32>>>;
}

fn expect_kind(params: &ModelParameters<f32>, kind: NetworkKind) -> Result<()> {
    if params.kind != kind {
        return Err(invalid!(
            "expected {kind} network parameters, got {}",
            params.kind
        ));
    }
    Ok(())
}

impl SlicePredictor for ModelParameters<f32> {
    fn predict_slice(&mut self, _z: usize, slice: &[f32], extent: usize) -> Result<Vec<f32>> {
        expect_kind(self, NetworkKind::Init)?;
        let x = Tensor::new(vec![1, 1, extent, extent], slice.to_vec())?;
        let out = forward_inference(self, &x)?;
        Ok(out.last().expect("init network has stages").data().to_vec())
    }
}

impl WindowPredictor for ModelParameters<f32> {
    fn predict_window(&mut self, window: &Window<'_>) -> Result<Vec<Vec<f32>>> {
        expect_kind(self, NetworkKind::Propagation)?;
        let out = forward_inference(self, &window.input.to_tensor())?;
        let finest = out.last().expect("propagation network has stages");
        Ok((0..LOOKAHEAD)
            .map(|c| finest.plane(0, c).to_vec())
            .collect())
    }
}

/// `floor(base_index / 2)`, the middle of the slices below the base.
pub fn select_init_slice(v: &Volume) -> usize {
    v.base_index / 2
}

/// Thresholds at `threshold` inclusive.
pub fn binarize(prob: &ProbabilityMask, threshold: f32) -> BinaryMask {
    prob.map(|p| (p >= threshold) as u8)
}

fn binarize_plane(p: &[f32]) -> Vec<f32> {
    p.iter()
        .map(|&v| f32::from(u8::from(v >= BINARY_THRESHOLD)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PropagationConfig {
    /// Slices the anchor advances per step, 1 to [`LOOKAHEAD`].
    pub stride: usize,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self { stride: LOOKAHEAD }
    }
}

/// Per-slice probability planes gathered during propagation.
#[derive(Debug, Clone)]
pub struct PropagationState {
    pub extent: usize,
    pub bounds: (usize, usize),
    pub masks: Vec<Option<Vec<f32>>>,
}

impl PropagationState {
    pub fn new(v: &Volume) -> Result<Self> {
        let [nx, ny, nz] = v.dims();
        if nx != ny {
            return Err(shape_err!("slices must be square, got {nx}×{ny}"));
        }
        Ok(Self {
            extent: nx,
            bounds: (0, v.base_index),
            masks: vec![None; nz],
        })
    }
}

/// Extends the masks from `start` toward the bound in `direction`, one
/// window per step. Returns the number of predictor invocations.
pub fn propagate<P: WindowPredictor + ?Sized>(
    v: &Volume,
    state: &mut PropagationState,
    start: usize,
    direction: Direction,
    predictor: &mut P,
    cfg: &PropagationConfig,
) -> Result<usize> {
    let (apex, base) = state.bounds;
    if !(apex..=base).contains(&start) {
        return Err(invalid!("start slice {start} outside {apex}..={base}"));
    }
    if !(1..=LOOKAHEAD).contains(&cfg.stride) {
        return Err(invalid!(
            "stride must lie in 1..={LOOKAHEAD}, got {}",
            cfg.stride
        ));
    }
    if state.masks[start].is_none() {
        return Err(invalid!("start slice {start} has no mask"));
    }
    let nz = v.dims()[2];
    let bound = match direction {
        Direction::Up => base,
        Direction::Down => apex,
    };
    let offset = |from: usize, k: usize| match direction {
        Direction::Up => (from + k).min(nz - 1),
        Direction::Down => from.saturating_sub(k),
    };
    let mut z = start;
    let mut invocations = 0;
    while z != bound {
        let remaining = z.abs_diff(bound);
        let (anchor, writes) = if remaining >= cfg.stride {
            (z, cfg.stride)
        } else {
            // Re-anchor back so the last lookahead lands on the bound,
            // never behind the starting slice.
            let back = LOOKAHEAD.min(bound.abs_diff(start));
            let anchor = match direction {
                Direction::Up => bound - back,
                Direction::Down => bound + back,
            };
            (anchor, LOOKAHEAD)
        };
        let lookahead: [usize; LOOKAHEAD] = std::array::from_fn(|k| offset(anchor, k + 1));
        let anchor_mask = state.masks[anchor]
            .as_deref()
            .map(binarize_plane)
            .ok_or_else(|| invalid!("anchor slice {anchor} has no mask"))?;
        let input = PropagationInput::new(
            state.extent,
            v.grid.slice(anchor).to_vec(),
            anchor_mask,
            lookahead
                .iter()
                .map(|&s| v.grid.slice(s).to_vec())
                .collect(),
        )?;
        let predicted = predictor.predict_window(&Window {
            anchor,
            lookahead,
            input: &input,
        })?;
        invocations += 1;
        if predicted.len() != LOOKAHEAD
            || predicted
                .iter()
                .any(|p| p.len() != state.extent * state.extent)
        {
            return Err(shape_err!("predictor returned malformed window masks"));
        }
        for (k, plane) in predicted.into_iter().enumerate().take(writes) {
            let s = lookahead[k];
            let within = match direction {
                Direction::Up => s <= bound,
                Direction::Down => s >= bound,
            };
            if within && state.masks[s].is_none() {
                state.masks[s] = Some(plane);
            }
        }
        z = offset(anchor, writes);
        if match direction {
            Direction::Up => z > bound,
            Direction::Down => z < bound,
        } {
            z = bound;
        }
    }
    Ok(invocations)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub probability: ProbabilityMask,
    pub binary: BinaryMask,
    pub init_index: usize,
    pub slices_segmented: RangeInclusive<usize>,
    /// Propagation steps taken upward and downward.
    pub invocations: (usize, usize),
}

/// Segments a preprocessed volume: init slice, propagation both ways,
/// stacking and thresholding. Slices above the base stay zero.
pub fn segment_volume<I, P>(
    v: &Volume,
    init: &mut I,
    prop: &mut P,
    cfg: &PropagationConfig,
) -> Result<SegmentationResult>
where
    I: SlicePredictor + ?Sized,
    P: WindowPredictor + ?Sized,
{
    let mut state = PropagationState::new(v)?;
    let z0 = select_init_slice(v);
    let first = init.predict_slice(z0, v.grid.slice(z0), state.extent)?;
    if first.len() != state.extent * state.extent {
        return Err(shape_err!("init predictor returned {} values", first.len()));
    }
    state.masks[z0] = Some(first);
    let up = propagate(v, &mut state, z0, Direction::Up, prop, cfg)?;
    let down = propagate(v, &mut state, z0, Direction::Down, prop, cfg)?;

    let plane = state.extent * state.extent;
    let mut data = vec![0.0f32; plane * v.dims()[2]];
    for (z, mask) in state.masks.iter().enumerate() {
        match mask {
            Some(m) => data[z * plane..(z + 1) * plane].copy_from_slice(m),
            None if z <= v.base_index => {
                return Err(invalid!("slice {z} was left unsegmented"));
            }
            None => {}
        }
    }
    let probability = Grid3::new(v.dims(), data)?;
    Ok(SegmentationResult {
        binary: binarize(&probability, BINARY_THRESHOLD),
        probability,
        init_index: z0,
        slices_segmented: 0..=v.base_index,
        invocations: (up, down),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const E: usize = 4;

    /// Encodes each slice index in its intensities so the oracle can look
    /// the answer up from the input alone.
    fn indexed_volume(nz: usize, base: usize) -> Volume {
        let data = (0..nz).flat_map(|z| vec![z as f32; E * E]).collect();
        Volume::new(Grid3::new([E, E, nz], data).unwrap(), [1.25; 3], base, None).unwrap()
    }

    fn truth(z: usize) -> Vec<f32> {
        (0..E * E)
            .map(|i| (i + z).is_multiple_of(3) as u8 as f32)
            .collect()
    }

    #[derive(Default)]
    struct Oracle {
        windows: Vec<(usize, [usize; LOOKAHEAD])>,
    }

    impl SlicePredictor for Oracle {
        fn predict_slice(&mut self, z: usize, _: &[f32], _: usize) -> Result<Vec<f32>> {
            Ok(truth(z))
        }
    }

    impl WindowPredictor for Oracle {
        fn predict_window(&mut self, w: &Window<'_>) -> Result<Vec<Vec<f32>>> {
            let t = w.input.to_tensor();
            assert_eq!(t.plane(0, 0)[0] as usize, w.anchor);
            assert_eq!(t.plane(0, 1), truth(w.anchor).as_slice());
            self.windows.push((w.anchor, w.lookahead));
            Ok((0..LOOKAHEAD)
                .map(|k| truth(t.plane(0, 2 + k)[0] as usize))
                .collect())
        }
    }

    #[test]
    fn upward_schedule_from_29_to_59() {
        let v = indexed_volume(60, 59);
        let mut state = PropagationState::new(&v).unwrap();
        state.masks[29] = Some(truth(29));
        let mut o = Oracle::default();
        let n = propagate(
            &v,
            &mut state,
            29,
            Direction::Up,
            &mut o,
            &Default::default(),
        )
        .unwrap();
        let anchors: Vec<usize> = o.windows.iter().map(|w| w.0).collect();
        assert_eq!(anchors, vec![29, 33, 37, 41, 45, 49, 53, 55]);
        assert_eq!(o.windows.last().unwrap().1, [56, 57, 58, 59]);
        assert_eq!(n, 8);
        assert!(state.masks[..29].iter().all(Option::is_none));
        for z in 30..60 {
            assert_eq!(state.masks[z].as_ref().unwrap(), &truth(z));
        }
    }

    #[test]
    fn downward_mirror_covers_apex() {
        let v = indexed_volume(60, 59);
        let mut state = PropagationState::new(&v).unwrap();
        state.masks[29] = Some(truth(29));
        let mut o = Oracle::default();
        let n = propagate(
            &v,
            &mut state,
            29,
            Direction::Down,
            &mut o,
            &Default::default(),
        )
        .unwrap();
        let anchors: Vec<usize> = o.windows.iter().map(|w| w.0).collect();
        assert_eq!(anchors, vec![29, 25, 21, 17, 13, 9, 5, 4]);
        assert_eq!(o.windows.last().unwrap().1, [3, 2, 1, 0]);
        assert_eq!(n, 8);
        for z in 0..29 {
            assert_eq!(state.masks[z].as_ref().unwrap(), &truth(z));
        }
    }

    #[test]
    fn start_at_bound_does_nothing() {
        let v = indexed_volume(12, 9);
        let mut state = PropagationState::new(&v).unwrap();
        state.masks[9] = Some(truth(9));
        let mut o = Oracle::default();
        assert_eq!(
            propagate(
                &v,
                &mut state,
                9,
                Direction::Up,
                &mut o,
                &Default::default()
            )
            .unwrap(),
            0
        );
        assert!(propagate(
            &v,
            &mut state,
            10,
            Direction::Up,
            &mut o,
            &Default::default()
        )
        .is_err());
    }

    #[test]
    fn short_runs_clamp_to_the_volume() {
        // Base 2, start 1: one upward slice, windows extend past the base.
        let v = indexed_volume(3, 2);
        let mut o = Oracle::default();
        let r = segment_volume(&v, &mut Oracle::default(), &mut o, &Default::default()).unwrap();
        assert_eq!(r.init_index, 1);
        assert_eq!(r.invocations, (1, 1));
        assert_eq!(o.windows, vec![(1, [2, 2, 2, 2]), (1, [0, 0, 0, 0])]);
    }

    #[test]
    fn oracle_reproduces_truth_for_every_stride() {
        for (nz, base) in [(60, 59), (23, 20), (1, 0), (7, 6)] {
            let v = indexed_volume(nz, base);
            let expected: Vec<u8> = (0..nz)
                .flat_map(|z| {
                    if z <= base {
                        truth(z).iter().map(|&x| x as u8).collect()
                    } else {
                        vec![0; E * E]
                    }
                })
                .collect();
            for stride in 1..=LOOKAHEAD {
                let cfg = PropagationConfig { stride };
                let r = segment_volume(&v, &mut Oracle::default(), &mut Oracle::default(), &cfg)
                    .unwrap();
                assert_eq!(
                    r.binary.data(),
                    expected.as_slice(),
                    "nz {nz} stride {stride}"
                );
                let (up, down) = (base - r.init_index, r.init_index);
                assert_eq!(r.invocations, (up.div_ceil(stride), down.div_ceil(stride)));
                assert_eq!(r.slices_segmented, 0..=base);
            }
        }
    }

    #[test]
    fn binarize_boundary() {
        let p = ProbabilityMask::new([3, 1, 1], vec![0.5, 0.4999, 1.0]).unwrap();
        let b = binarize(&p, 0.5);
        assert_eq!(b.data(), &[1, 0, 1]);
        let again = binarize(&b.map(f32::from), 0.5);
        assert_eq!(again, b);
    }

    #[test]
    fn init_slice_is_the_midpoint() {
        assert_eq!(select_init_slice(&indexed_volume(60, 59)), 29);
        assert_eq!(select_init_slice(&indexed_volume(1, 0)), 0);
        assert_eq!(select_init_slice(&indexed_volume(20, 10)), 5);
    }

    #[test]
    fn network_kind_is_checked() {
        use crate::networks::{init_parameters, Architecture};
        let arch = Architecture::with_widths(16, &[2]);
        let mut prop = init_parameters::<f32>(NetworkKind::Propagation, &arch, 0).unwrap();
        assert!(prop.predict_slice(0, &[0.0; 256], 16).is_err());
    }
}
