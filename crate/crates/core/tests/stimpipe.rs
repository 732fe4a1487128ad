use bodyscene::raster::{FlowField, Frame, Mask};
use bodyscene::stimpipe::{
    background_only, body_only, body_version, dilate, estimate_flow, inpaint, interior_epe,
    union_mask, StimulusVersion, DILATION_FACTOR,
};
use bodyscene::study::flow_check;
use bodyscene::synth::{generate_clip, generate_dataset_in_memory, SynthConfig};
use bodyscene::Error;
use proptest::prelude::*;

fn square(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> Mask {
    Mask::from_fn(h, w, |y, x| {
        (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x)
    })
}

fn bounding_box(m: &Mask) -> (usize, usize, usize, usize) {
    let (h, w) = m.dims();
    let (mut y0, mut x0, mut y1, mut x1) = (h, w, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if m.get(y, x) {
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y);
                x1 = x1.max(x);
            }
        }
    }
    (y0, x0, y1, x1)
}

#[test]
fn body_only_keeps_the_mask_and_blacks_out_the_rest() {
    let clip = generate_clip(&SynthConfig::default(), 2, 11).unwrap();
    for (f, m) in clip.frames.iter().zip(&clip.masks) {
        let out = body_only(f, m).unwrap();
        let (h, w) = f.dims();
        for y in 0..h {
            for x in 0..w {
                let want = if m.get(y, x) { f.pixel(y, x) } else { [0.0; 3] };
                assert_eq!(out.pixel(y, x), want);
            }
        }
    }
}

#[test]
fn background_only_replaces_the_same_region_in_every_frame() {
    let clip = generate_clip(&SynthConfig::default(), 5, 3).unwrap();
    let bg = background_only(&clip).unwrap();
    let region = bg.region.clone().unwrap();
    assert!(union_mask(&clip).unwrap().is_subset_of(&region));
    let (h, w) = clip.dims();
    for (orig, out) in clip.frames.iter().zip(&bg.frames) {
        for y in 0..h {
            for x in 0..w {
                if !region.get(y, x) {
                    assert_eq!(orig.pixel(y, x), out.pixel(y, x));
                }
            }
        }
    }
    // The background is static, so the inpainted frames agree everywhere.
    for f in &bg.frames[1..] {
        assert_eq!(f, &bg.frames[0]);
    }
    assert!(bg.flows.iter().all(FlowField::is_zero));
}

#[test]
fn ten_pixel_square_dilates_to_twelve() {
    let m = square(32, 32, 11, 11, 10);
    let d = dilate(&m, DILATION_FACTOR).unwrap();
    assert_eq!(bounding_box(&d), (10, 10, 21, 21));
    assert_eq!(d.area(), 144);
}

#[test]
fn dilation_by_one_is_the_identity() {
    let m = square(32, 32, 3, 7, 5);
    assert_eq!(dilate(&m, 1.0).unwrap(), m);
    assert!(matches!(dilate(&m, 0.9), Err(Error::Invalid(_))));
}

proptest! {
    #[test]
    fn dilation_is_a_superset_and_monotone(
        bits in proptest::collection::vec(any::<bool>(), 16 * 16),
        a in 1.0f64..1.5,
        b in 1.0f64..1.5,
    ) {
        let m = Mask::from_fn(16, 16, |y, x| bits[y * 16 + x]);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let dl = dilate(&m, lo).unwrap();
        let dh = dilate(&m, hi).unwrap();
        prop_assert!(m.is_subset_of(&dl));
        prop_assert!(dl.is_subset_of(&dh));
    }
}

#[test]
fn inpainting_a_ramp_recovers_it() {
    let ramp = |y: usize, x: usize| [x as f32 / 31.0, y as f32 / 31.0, 0.5];
    let frame = Frame::from_fn(32, 32, ramp);
    let region = square(32, 32, 8, 10, 12);
    let holed = Frame::from_fn(32, 32, |y, x| {
        if region.get(y, x) {
            [0.0; 3]
        } else {
            ramp(y, x)
        }
    });
    let out = inpaint(&holed, &region).unwrap();
    let err = out
        .data()
        .iter()
        .zip(frame.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(err <= 1e-2, "max error {err}");
}

#[test]
fn inpainting_the_whole_frame_is_an_error() {
    let frame = Frame::black(32, 32);
    let all = Mask::from_fn(32, 32, |_, _| true);
    assert!(matches!(
        inpaint(&frame, &all),
        Err(Error::RegionCoversFrame { .. })
    ));
    let none = Mask::empty(32, 32);
    assert_eq!(inpaint(&frame, &none).unwrap(), frame);
}

fn texture(y: f32, x: f32) -> f32 {
    0.5 + 0.2 * (0.7 * x + 0.3).sin() + 0.2 * (0.55 * y + 0.9 * (0.2 * x).cos()).sin()
}

#[test]
fn one_pixel_shift_is_recovered() {
    let a = Frame::from_fn(32, 32, |y, x| [texture(y as f32, x as f32); 3]);
    let b = Frame::from_fn(32, 32, |y, x| [texture(y as f32, x as f32 - 1.0); 3]);
    let flow = estimate_flow(&a, &b).unwrap();
    let (mut worst, mut n) = (0.0f32, 0);
    for y in 4..28 {
        for x in 4..28 {
            let d = flow.get(y, x);
            worst = worst.max(((d[0] - 1.0).powi(2) + d[1].powi(2)).sqrt());
            n += 1;
        }
    }
    assert!(n > 0 && worst <= 0.25, "worst interior error {worst}");
}

#[test]
fn static_pair_has_exactly_zero_flow() {
    let a = Frame::from_fn(32, 32, |y, x| [texture(y as f32, x as f32), 0.2, 0.7]);
    assert!(estimate_flow(&a, &a).unwrap().is_zero());
}

#[test]
fn flow_matches_ground_truth_on_body_interiors() {
    let config = SynthConfig {
        clips_per_class: 3,
        ..SynthConfig::default()
    };
    let (manifest, clips) = generate_dataset_in_memory(&config).unwrap();
    let check = flow_check(&manifest, &clips).unwrap();
    for c in &check.per_class {
        let e = c.mean_epe.expect("every class has interior pixels");
        assert!(e <= 0.5, "{}: mean interior EPE {e}", c.category);
    }
}

#[test]
fn interior_epe_ignores_pixels_near_the_boundary() {
    let mask = square(16, 16, 4, 4, 8);
    let truth = FlowField::zeros(16, 16);
    let mut est = FlowField::zeros(16, 16);
    est.set(4, 4, [3.0, 4.0]);
    assert_eq!(interior_epe(&est, &truth, &mask).unwrap(), Some(0.0));
    est.set(8, 8, [3.0, 4.0]);
    assert_eq!(interior_epe(&est, &truth, &mask).unwrap(), Some(5.0 / 16.0));
    assert_eq!(
        interior_epe(&est, &truth, &square(16, 16, 0, 0, 4)).unwrap(),
        None
    );
}

#[test]
fn body_version_flows_follow_the_sprite() {
    let clip = generate_clip(&SynthConfig::default(), 1, 5).unwrap();
    let body = body_version(&clip).unwrap();
    assert_eq!(body.version, StimulusVersion::BodyOnly);
    assert_eq!(body.flows.len(), clip.len() - 1);
    assert!(body.flows.iter().any(|f| !f.is_zero()));
}

#[test]
fn version_tags_round_trip() {
    for v in StimulusVersion::ALL {
        assert_eq!(v.tag().parse::<StimulusVersion>().unwrap(), v);
    }
    assert!("full".parse::<StimulusVersion>().is_err());
}
