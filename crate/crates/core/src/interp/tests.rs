use super::*;
use crate::fields::{DynamicFieldOutput, FnDynamicField, FnStaticField, StaticFieldOutput};
use crate::geometry::project;
use crate::metrics::psnr;
use crate::model::FieldScene;
use crate::synth::{
    render_oracle, AnalyticScene, FlowDir, Motion, Primitive, SceneBox, Shape,
};

type NoStatic = FnStaticField<fn([f64; 3], [f64; 3]) -> StaticFieldOutput<f64>>;

const BOUNDS: Bounds<f64> = Bounds { near: 2.0, far: 6.0 };

fn camera(size: usize) -> Camera<f64> {
    Camera::look_at([0.0, 0.0, 4.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], 50.0, size, size).unwrap()
}

/// One white blob moving `speed` units per frame along x, starting at `x0`.
fn sliding_blob(speed: f64, x0: f64, frames: usize) -> AnalyticScene {
    AnalyticScene {
        primitives: vec![Primitive {
            shape: Shape::Blob { sigma: 0.2 },
            color: [1.0, 1.0, 1.0],
            density: 40.0,
            center: [x0, 0.0, 0.0],
            motion: Motion::Linear {
                velocity: [speed, 0.0, 0.0],
            },
        }],
        frame_count: frames,
        scene_box: SceneBox {
            min: [-4.0; 3],
            max: [4.0; 3],
        },
    }
}

fn exact(scene: &AnalyticScene) -> FieldScene<NoStatic, impl DynamicRadiance<f64> + Sync + '_> {
    FieldScene {
        static_field: None,
        dynamic: scene.field(),
        frame_count: scene.frame_count,
    }
}

use crate::fields::DynamicRadiance;

/// Intensity-weighted horizontal centroid in pixels.
fn centroid_x(img: &Image) -> f64 {
    let (mut m, mut mx) = (0.0, 0.0);
    for y in 0..img.height {
        for x in 0..img.width {
            let v = img.get(x, y, 0);
            m += v;
            mx += v * (x as f64 + 0.5);
        }
    }
    mx / m
}

#[test]
fn endpoints_match_direct_renders() {
    let scene = AnalyticScene::blob_slide(4);
    let field = exact(&scene);
    let cam = camera(32);
    for (frame, delta, target) in [(1usize, 0.0, 1.0), (1, 1.0, 2.0), (3, 0.0, 3.0)] {
        let s = render_spacetime(&field, &cam, frame, delta, BOUNDS, 64).unwrap();
        let direct = render_view(&field, &cam, target, BOUNDS, 64).unwrap().image;
        let p = psnr(&s.image, &direct, None).unwrap();
        assert!(p >= 40.0, "frame {frame} delta {delta}: {p} dB");
    }
}

#[test]
fn static_scene_at_zero_fraction_is_the_direct_render() {
    let mut scene = AnalyticScene::blob_slide(3);
    for p in &mut scene.primitives {
        p.motion = Motion::Static;
    }
    let field = exact(&scene);
    let cam = camera(24);
    let s = render_spacetime(&field, &cam, 0, 0.0, BOUNDS, 48).unwrap();
    let direct = render_view(&field, &cam, 0.0, BOUNDS, 48).unwrap().image;
    assert!(psnr(&s.image, &direct, None).unwrap() >= 40.0);
}

#[test]
fn buffer_alpha_is_conserved_at_zero_fraction() {
    let scene = AnalyticScene::blob_slide(3);
    let field = exact(&scene);
    let cam = camera(24);
    let samples = 48;
    let s = render_spacetime(&field, &cam, 1, 0.0, BOUNDS, samples).unwrap();
    let sw = sweep(&cam, BOUNDS, samples).unwrap();
    let q = field.query_points(&sw.points, &sw.dirs, 1.0).unwrap();
    let direct: f64 = q
        .sigma
        .iter()
        .zip(&sw.deltas)
        .map(|(s, d)| 1.0 - (-s * d).exp())
        .sum();
    let total = s.buffer.total_alpha();
    assert!(((total - direct) / direct).abs() < 0.05, "{total} vs {direct}");
}

#[test]
fn midpoint_blob_lands_at_the_analytic_midpoint() {
    let scene = sliding_blob(2.0, -1.0, 2);
    let field = exact(&scene);
    let cam = camera(64);
    let s = render_spacetime(&field, &cam, 0, 0.5, BOUNDS, 128).unwrap();
    let [u, _] = project(&cam, [0.0, 0.0, 0.0]).unwrap();
    let c = centroid_x(&s.image);
    assert!((c - u).abs() < 1.0, "centroid {c}, expected {u}");
}

#[test]
fn centroid_moves_monotonically_with_the_fraction() {
    let scene = sliding_blob(1.0, -0.5, 2);
    let field = exact(&scene);
    let cam = camera(32);
    let xs: Vec<f64> = [0.0, 0.25, 0.5, 0.75, 1.0]
        .iter()
        .map(|&d| centroid_x(&render_spacetime(&field, &cam, 0, d, BOUNDS, 64).unwrap().image))
        .collect();
    assert!(xs.windows(2).all(|w| w[1] > w[0]), "{xs:?}");
}

#[test]
fn direct_blend_endpoints_are_bitwise_renders() {
    let scene = AnalyticScene::blob_slide(3);
    let field = exact(&scene);
    let cam = camera(16);
    let at = |t: f64| render_view(&field, &cam, t, BOUNDS, 32).unwrap().image;
    assert_eq!(direct_time_blend(&field, &cam, 0, 0.0, BOUNDS, 32).unwrap(), at(0.0));
    assert_eq!(direct_time_blend(&field, &cam, 0, 1.0, BOUNDS, 32).unwrap(), at(1.0));
}

#[test]
fn fractions_outside_the_unit_interval_are_rejected() {
    let scene = AnalyticScene::blob_slide(3);
    let field = exact(&scene);
    let cam = camera(8);
    for d in [-0.1, 1.5, f64::NAN] {
        assert!(render_spacetime(&field, &cam, 0, d, BOUNDS, 8).is_err());
        assert!(direct_time_blend(&field, &cam, 0, d, BOUNDS, 8).is_err());
    }
    assert!(render_spacetime(&field, &cam, 2, 0.5, BOUNDS, 8).is_err());
    assert!(render_spacetime(&field, &cam, 2, 0.0, BOUNDS, 8).is_ok());
}

/// The two neighbouring frames cross-faded at fractional times, the way a
/// field that never saw intermediate times tends to behave.
fn cross_fade(scene: &AnalyticScene) -> impl Fn(Vec3<f64>, Vec3<f64>, f64) -> DynamicFieldOutput<f64> + '_ {
    let span = (scene.frame_count - 1) as f64;
    move |x, _d, t| {
        let frame = t * span;
        let (a, b) = (frame.floor(), frame.ceil());
        let w = frame - a;
        let (ca, sa) = scene.eval(x, a);
        let (cb, sb) = scene.eval(x, b);
        let sigma = (1.0 - w) * sa + w * sb;
        let color = if sigma > 0.0 {
            [0, 1, 2].map(|k| ((1.0 - w) * sa * ca[k] + w * sb * cb[k]) / sigma)
        } else {
            [0.0; 3]
        };
        DynamicFieldOutput {
            color,
            sigma,
            flow_fwd: scene.scene_flow(x, frame, FlowDir::Forward),
            flow_bwd: scene.scene_flow(x, frame, FlowDir::Backward),
            w_fwd: 1.0,
            w_bwd: 1.0,
        }
    }
}

#[test]
fn splatting_beats_time_blending_on_the_moving_region() {
    let scene = sliding_blob(1.0, -0.5, 2);
    let field = FieldScene::<NoStatic, _> {
        static_field: None,
        dynamic: FnDynamicField(cross_fade(&scene)),
        frame_count: 2,
    };
    let cam = camera(32);
    let gt = render_oracle(&scene, &cam, 0.5, BOUNDS, 512).unwrap();
    let a = render_oracle(&scene, &cam, 0.0, BOUNDS, 512).unwrap().mask();
    let b = render_oracle(&scene, &cam, 1.0, BOUNDS, 512).unwrap().mask();
    let mut mask = gt.mask();
    for k in 0..mask.data.len() {
        mask.data[k] = mask.data[k].max(a.data[k]).max(b.data[k]);
    }
    let splat = render_spacetime(&field, &cam, 0, 0.5, BOUNDS, 96).unwrap().image;
    let blend = direct_time_blend(&field, &cam, 0, 0.5, BOUNDS, 96).unwrap();
    let ps = psnr(&splat, &gt.image, Some(&mask)).unwrap();
    let pb = psnr(&blend, &gt.image, Some(&mask)).unwrap();
    assert!(ps > pb, "splat {ps} dB, blend {pb} dB");
}
