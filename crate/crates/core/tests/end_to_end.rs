use myoseg::io::{decode_mask, decode_volume, encode_mask, encode_volume, Header};
use myoseg::mesh::{encode_obj, extract_surface, parse_obj};
use myoseg::metrics::{dice_3d, slicewise_dice_profile};
use myoseg::phantom::{generate_phantom, PhantomSpec};
use myoseg::pipeline::{
    preprocess_pair, segment_volume, PropagationConfig, SlicePredictor, Window, WindowPredictor,
};
use myoseg::volume::BinaryMask;
use myoseg::Result;

struct Truth<'a>(&'a BinaryMask);

impl Truth<'_> {
    fn plane(&self, z: usize) -> Vec<f32> {
        self.0.slice(z).iter().map(|&v| f32::from(v)).collect()
    }
}

impl SlicePredictor for Truth<'_> {
    fn predict_slice(&mut self, z: usize, _: &[f32], _: usize) -> Result<Vec<f32>> {
        Ok(self.plane(z))
    }
}

impl WindowPredictor for Truth<'_> {
    fn predict_window(&mut self, w: &Window<'_>) -> Result<Vec<Vec<f32>>> {
        Ok(w.lookahead.iter().map(|&z| self.plane(z)).collect())
    }
}

#[test]
fn stored_phantom_segments_back_to_its_ground_truth() {
    let (volume, gt) = generate_phantom(&PhantomSpec {
        seed: 17,
        ..PhantomSpec::default()
    })
    .unwrap();
    let header = Header::of(&volume);
    let volume = decode_volume(&encode_volume(&volume).unwrap()).unwrap();
    let (gt, _) = decode_mask(&encode_mask(&gt, &header).unwrap()).unwrap();

    let (v, g) = preprocess_pair(&volume, &gt).unwrap();
    assert_eq!(v.dims(), [128, 128, 60]);
    let mut truth = Truth(&g);
    let mut other = Truth(&g);
    for stride in 1..=4 {
        let result =
            segment_volume(&v, &mut truth, &mut other, &PropagationConfig { stride }).unwrap();
        assert_eq!(result.init_index, v.base_index / 2);
        assert_eq!(dice_3d(&result.binary, &g).unwrap(), 1.0);
        let profile = slicewise_dice_profile(&result.binary, &g).unwrap();
        assert_eq!(profile.smoothness, 0.0);
    }
}

#[test]
fn ground_truth_surface_survives_obj_round_trip() {
    let spec = PhantomSpec {
        seed: 3,
        ..PhantomSpec::default()
    };
    let (_, gt) = generate_phantom(&spec).unwrap();
    let mesh = extract_surface(&gt, spec.spacing_mm).unwrap();
    mesh.validate().unwrap();
    assert!(mesh.signed_volume() > 0.0);
    let back = parse_obj(&encode_obj(&mesh)).unwrap();
    assert_eq!(back, mesh);
}
