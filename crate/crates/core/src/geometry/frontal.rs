//! Pose normalization by rendering the textured mesh in a canonical
//! frontal orthographic view.
//!
//! Each mesh vertex takes a bilinear texture sample at its projection into
//! the aligned image, then the mesh is rasterized front-on with a depth
//! buffer (larger z is closer to the viewer). No illumination model.

use crate::image::GrayImage;

use super::{
    crop_holistic_at, project_point, similarity_align, CameraFit, GenericMesh, GeometryError,
    Landmarks5, Similarity, DEFAULT_CROP_ORIGIN, DEFAULT_FRONTAL_RESIDUAL_THRESHOLD, HOLISTIC_H,
    HOLISTIC_W,
};

#[derive(Debug, Clone)]
pub struct FrontalizeParams {
    /// Camera residual above this is rejected as unreliable.
    pub residual_threshold: f64,
    /// Template that pins the canonical frontal view in the aligned frame.
    pub template: Landmarks5,
    /// Holistic crop origin; the render covers the same 165x120 window.
    pub crop_origin: (usize, usize),
}

impl Default for FrontalizeParams {
    fn default() -> Self {
        FrontalizeParams {
            residual_threshold: DEFAULT_FRONTAL_RESIDUAL_THRESHOLD,
            template: super::default_template(),
            crop_origin: DEFAULT_CROP_ORIGIN,
        }
    }
}

/// Canonical frontal camera: a 2D similarity taking the mesh anchors'
/// frontal (x, y) coordinates onto the template points, shifted into the
/// crop window. The z column is zero (orthographic, facing the viewer).
pub fn frontal_camera(
    mesh: &GenericMesh,
    params: &FrontalizeParams,
) -> Result<CameraFit, GeometryError> {
    let src: Vec<[f64; 2]> = mesh.anchor_points().iter().map(|p| [p[0], p[1]]).collect();
    let dst: Vec<[f64; 2]> = params
        .template
        .points
        .iter()
        .map(|p| {
            [
                p[0] - params.crop_origin.0 as f64,
                p[1] - params.crop_origin.1 as f64,
            ]
        })
        .collect();
    let sim = Similarity::fit(&src, &dst)?;
    Ok(CameraFit::new([
        [sim.a, -sim.b, 0.0, sim.tx],
        [sim.b, sim.a, 0.0, sim.ty],
    ]))
}

/// Renders the 165x120 frontalized face. Texture lookups are clamped to
/// the aligned image; pixels the mesh never covers stay 0.
pub fn frontalize(
    aligned: &GrayImage,
    cam: &CameraFit,
    mesh: &GenericMesh,
    params: &FrontalizeParams,
) -> Result<GrayImage, GeometryError> {
    if cam.residual > params.residual_threshold {
        return Err(GeometryError::FrontalizationUnreliable {
            residual: cam.residual,
            threshold: params.residual_threshold,
        });
    }
    // Per-vertex texture from the fitted camera.
    let texture: Vec<f32> = mesh
        .vertices
        .iter()
        .map(|&v| {
            let p = project_point(cam, v);
            aligned.sample_clamped(p[0] as f32, p[1] as f32)
        })
        .collect();

    let front = frontal_camera(mesh, params)?;
    let projected: Vec<[f64; 2]> = mesh
        .vertices
        .iter()
        .map(|&v| project_point(&front, v))
        .collect();

    let (h, w) = (HOLISTIC_H, HOLISTIC_W);
    let mut color = vec![0.0f32; h * w];
    let mut depth = vec![f64::NEG_INFINITY; h * w];
    for tri in &mesh.triangles {
        rasterize_triangle(
            tri.map(|i| projected[i]),
            tri.map(|i| mesh.vertices[i][2]),
            tri.map(|i| texture[i]),
            w,
            h,
            &mut color,
            &mut depth,
        );
    }
    GrayImage::from_vec(h, w, color).map_err(|_| unreachable!())
}

fn rasterize_triangle(
    p: [[f64; 2]; 3],
    z: [f64; 3],
    tex: [f32; 3],
    width: usize,
    height: usize,
    color: &mut [f32],
    depth: &mut [f64],
) {
    let area = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]);
    if area.abs() < 1e-12 {
        return;
    }
    let min_x = p.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let max_x = p.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max).ceil().min((width - 1) as f64) as usize;
    let min_y = p.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let max_y = p.iter().map(|q| q[1]).fold(f64::NEG_INFINITY, f64::max).ceil().min((height - 1) as f64) as usize;
    if min_x > max_x || min_y > max_y {
        return;
    }
    let edge = |a: [f64; 2], b: [f64; 2], x: f64, y: f64| {
        (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0])
    };
    for py in min_y..=max_y {
        for px in min_x..=max_x {
            let (x, y) = (px as f64, py as f64);
            let w0 = edge(p[1], p[2], x, y) / area;
            let w1 = edge(p[2], p[0], x, y) / area;
            let w2 = edge(p[0], p[1], x, y) / area;
            if w0 < -1e-9 || w1 < -1e-9 || w2 < -1e-9 {
                continue;
            }
            let d = w0 * z[0] + w1 * z[1] + w2 * z[2];
            let idx = py * width + px;
            if d > depth[idx] {
                depth[idx] = d;
                color[idx] =
                    (w0 * tex[0] as f64 + w1 * tex[1] as f64 + w2 * tex[2] as f64) as f32;
            }
        }
    }
}

/// Fraction and mean-absolute-difference statistics between the rendered
/// region and a reference; used by round-trip checks.
pub fn covered_mad(render: &GrayImage, reference: &GrayImage) -> (f64, f64) {
    let mut n = 0usize;
    let mut sum = 0.0f64;
    for y in 0..render.height() {
        for x in 0..render.width() {
            let v = render.get(y, x);
            if v > 0.0 {
                n += 1;
                sum += (v - reference.get(y, x)).abs() as f64;
            }
        }
    }
    if n == 0 {
        (0.0, 0.0)
    } else {
        (
            n as f64 / (render.height() * render.width()) as f64,
            sum / n as f64,
        )
    }
}

/// Frontal-projection round trip: aligns nothing, textures the mesh from a
/// synthesized frontal camera in the aligned frame, and renders. Exposed
/// for tests and the acceptance harness.
pub fn frontal_round_trip(
    aligned: &GrayImage,
    mesh: &GenericMesh,
    params: &FrontalizeParams,
) -> Result<(GrayImage, GrayImage), GeometryError> {
    // Camera identical to the canonical frontal view but in the full
    // 230x230 frame (no crop shift).
    let full_frame = FrontalizeParams {
        crop_origin: (0, 0),
        ..params.clone()
    };
    let cam230 = frontal_camera(mesh, &full_frame)?;
    let render = frontalize(aligned, &cam230, mesh, params)?;
    let reference = crop_holistic_at(aligned, params.crop_origin)?;
    Ok((render, reference))
}

// Re-exported for the pipeline: aligning then frontalizing in one call is
// common enough in tests to warrant the helper.
pub fn align_and_frontalize(
    image: &GrayImage,
    lm: &Landmarks5,
    mesh: &GenericMesh,
    params: &FrontalizeParams,
) -> Result<GrayImage, GeometryError> {
    let (aligned, aligned_lm) = similarity_align(image, lm, &params.template)?;
    let cam = super::fit_camera(&aligned_lm, mesh)?;
    frontalize(&aligned, &cam, mesh, params)
}
