use proptest::prelude::*;
use tridiff::geometry::{generate_rays, CameraIntrinsics, CameraPose, Vec3};
use tridiff::nerf::{composite_ray, render_field, RadianceField, RenderConfig};

/// Constant density inside a ball of the given radius centred at the origin.
struct Ball {
    radius: f64,
    sigma: f64,
    color: [f64; 3],
}

impl RadianceField for Ball {
    fn eval(&self, points: &[Vec3]) -> Vec<(f64, [f64; 3])> {
        points
            .iter()
            .map(|p| if p.norm() < self.radius { (self.sigma, self.color) } else { (0.0, [0.0; 3]) })
            .collect()
    }
}

fn center_opacity(sigma: f64, steps: usize) -> f64 {
    let ball = Ball { radius: 0.5, sigma, color: [0.2, 0.4, 0.6] };
    let rays = generate_rays(&CameraIntrinsics::square(50.0, 1), &CameraPose::canonical()).unwrap();
    render_field(&ball, &rays, &RenderConfig::with_steps(steps)).unwrap()[0][3]
}

proptest! {
    #[test]
    fn compositing_weights_partition_unity(
        samples in prop::collection::vec((0.0f64..50.0, 0.001f64..0.2, 0.0f64..1.0), 1..64),
        bg in 0.0f64..1.0,
    ) {
        let sigma: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let deltas: Vec<f64> = samples.iter().map(|s| s.1).collect();
        let mut t_vals = Vec::with_capacity(deltas.len());
        let mut t = 1.0;
        for d in &deltas {
            t_vals.push(t);
            t += d;
        }
        // Every sample and the background share one colour, so the result is that colour.
        let c = samples[0].2;
        let out = composite_ray(sigma.iter().copied(), std::iter::repeat([c; 3]), &t_vals, &deltas, [c; 3], t);
        for k in 0..3 {
            prop_assert!((out[k] - c).abs() < 1e-12);
        }
        prop_assert!(out[3] >= 0.0 && out[3] <= 1.0 + 1e-12);
        prop_assert!(out[4] >= 1.0 - 1e-12 && out[4] <= t + 1e-12);

        // Against the background alone the colour is the leftover transmittance.
        let dark = composite_ray(sigma.iter().copied(), std::iter::repeat([0.0; 3]), &t_vals, &deltas, [bg; 3], t);
        prop_assert!((dark[0] - bg * (1.0 - dark[3])).abs() < 1e-12);
    }
}

#[test]
fn opacity_grows_with_density() {
    let mut last = 0.0;
    for sigma in [0.1, 0.5, 1.0, 2.0, 5.0, 20.0, 100.0] {
        let a = center_opacity(sigma, 256);
        assert!(a > last, "sigma {sigma}: {a} <= {last}");
        last = a;
    }
    assert!(last > 0.99);
}

#[test]
fn quadrature_error_shrinks_with_more_steps() {
    // Chord length through the ball along the central ray is 1.
    let sigma = 3.0;
    let exact = 1.0 - (-sigma * 1.0f64).exp();
    let errors: Vec<f64> = [16, 32, 64, 128, 256]
        .iter()
        .map(|&n| (center_opacity(sigma, n) - exact).abs())
        .collect();
    // Midpoint samples of a hard edge can plateau between doublings but never get worse.
    for w in errors.windows(2) {
        assert!(w[1] <= w[0], "{errors:?}");
    }
    assert!(errors[4] < errors[0] / 10.0, "{errors:?}");
}
