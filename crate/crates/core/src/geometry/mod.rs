//! Geometric multimodal input generation.
//!
//! A raw image plus five landmarks becomes eight modality inputs: one
//! aligned holistic crop, one frontalized crop rendered through a generic
//! 3D mesh, and six patches centered on projected mesh landmarks.

mod camera;
mod frontal;
mod mesh;

pub use camera::{fit_camera, project_point, project_points, CameraFit};
pub use frontal::{
    align_and_frontalize, covered_mad, frontal_camera, frontal_round_trip, frontalize,
    FrontalizeParams,
};
pub use mesh::{synthetic_face_mesh, GenericMesh, DEFAULT_PATCH_SELECTION, PATCH_MIRROR_MAP};

use crate::image::GrayImage;
use thiserror::Error;

/// Side of the square five-point-aligned frame.
pub const ALIGNED_SIZE: usize = 230;
/// Holistic crop height.
pub const HOLISTIC_H: usize = 165;
/// Holistic crop width.
pub const HOLISTIC_W: usize = 120;
/// Side of a landmark-centered patch.
pub const PATCH_SIZE: usize = 100;
/// Default holistic crop origin (x, y) inside the aligned frame: centered
/// horizontally, biased upward so eyes and mouth both fall inside.
pub const DEFAULT_CROP_ORIGIN: (usize, usize) = (55, 25);
/// Default cap on camera RMS reprojection error before frontalization is
/// considered unreliable.
pub const DEFAULT_FRONTAL_RESIDUAL_THRESHOLD: f64 = 15.0;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("alignment failure: {0}")]
    AlignmentFailure(String),
    #[error("{context}: expected {expected_h}x{expected_w}, got {got_h}x{got_w}")]
    Dimension {
        context: &'static str,
        expected_h: usize,
        expected_w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("camera fit failure: {0}")]
    FitFailure(String),
    #[error("patch {index} center ({:.1}, {:.1}) out of frame", center.0, center.1)]
    PatchOutOfFrame { index: usize, center: (f64, f64) },
    #[error("frontalization unreliable: residual {residual:.2} px exceeds threshold {threshold:.2} px")]
    FrontalizationUnreliable { residual: f64, threshold: f64 },
    #[error("mesh format error at line {line}: {msg}")]
    MeshFormat { line: usize, msg: String },
    #[error("invalid mesh: {0}")]
    MeshInvalid(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Indices into [`Landmarks5`], fixed order.
pub const LM_LEFT_EYE: usize = 0;
pub const LM_RIGHT_EYE: usize = 1;
pub const LM_NOSE: usize = 2;
pub const LM_LEFT_MOUTH: usize = 3;
pub const LM_RIGHT_MOUTH: usize = 4;

/// Five facial points in image pixels: left eye, right eye, nose tip,
/// left mouth corner, right mouth corner ("left" = image left).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmarks5 {
    pub points: [[f64; 2]; 5],
}

impl Landmarks5 {
    pub fn new(points: [[f64; 2]; 5]) -> Self {
        Landmarks5 { points }
    }

    /// Checks finiteness and that the points are not all (nearly) collinear.
    pub fn validate(&self) -> Result<(), GeometryError> {
        for p in &self.points {
            if !p[0].is_finite() || !p[1].is_finite() {
                return Err(GeometryError::AlignmentFailure(
                    "non-finite landmark coordinate".into(),
                ));
            }
        }
        // Smallest eigenvalue of the 2x2 point covariance vanishes exactly
        // when the five points are collinear (coincident included).
        let n = 5.0;
        let (mx, my) = self
            .points
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p[0] / n, sy + p[1] / n));
        let (mut cxx, mut cxy, mut cyy) = (0.0, 0.0, 0.0);
        for p in &self.points {
            let dx = p[0] - mx;
            let dy = p[1] - my;
            cxx += dx * dx;
            cxy += dx * dy;
            cyy += dy * dy;
        }
        let tr = cxx + cyy;
        let det = cxx * cyy - cxy * cxy;
        let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
        let lambda_min = tr / 2.0 - disc;
        let lambda_max = tr / 2.0 + disc;
        if lambda_max <= 0.0 || lambda_min <= 1e-9 * lambda_max {
            return Err(GeometryError::AlignmentFailure(
                "degenerate landmark configuration (collinear or coincident)".into(),
            ));
        }
        Ok(())
    }

    /// Landmarks of the horizontally mirrored image: x -> width-1-x with
    /// the left/right eye and mouth labels swapped.
    pub fn mirrored(&self, image_width: usize) -> Landmarks5 {
        let w = (image_width - 1) as f64;
        let m = |p: [f64; 2]| [w - p[0], p[1]];
        Landmarks5::new([
            m(self.points[LM_RIGHT_EYE]),
            m(self.points[LM_LEFT_EYE]),
            m(self.points[LM_NOSE]),
            m(self.points[LM_RIGHT_MOUTH]),
            m(self.points[LM_LEFT_MOUTH]),
        ])
    }
}

/// Canonical five-point template inside the 230x230 aligned frame: eyes on
/// a horizontal line at 38% height, interocular distance 36% of width.
pub fn default_template() -> Landmarks5 {
    let s = ALIGNED_SIZE as f64;
    Landmarks5::new([
        [0.5 * s - 0.18 * s, 0.38 * s],
        [0.5 * s + 0.18 * s, 0.38 * s],
        [0.5 * s, 0.57 * s],
        [0.5 * s - 0.15 * s, 0.72 * s],
        [0.5 * s + 0.15 * s, 0.72 * s],
    ])
}

/// 4-DOF similarity transform (x, y) -> (a*x - b*y + tx, b*x + a*y + ty).
#[derive(Debug, Clone, Copy)]
pub struct Similarity {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity {
            a: 1.0,
            b: 0.0,
            tx: 0.0,
            ty: 0.0,
        }
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.a * p[0] - self.b * p[1] + self.tx,
            self.b * p[0] + self.a * p[1] + self.ty,
        ]
    }

    pub fn inverse(&self) -> Similarity {
        let s2 = self.a * self.a + self.b * self.b;
        let (ia, ib) = (self.a / s2, -self.b / s2);
        Similarity {
            a: ia,
            b: ib,
            tx: -(ia * self.tx - ib * self.ty),
            ty: -(ib * self.tx + ia * self.ty),
        }
    }

    /// Least-squares fit mapping `src` points onto `dst` points.
    ///
    /// Closed form on centered points; fails when the source points are all
    /// coincident (zero spread).
    pub fn fit(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<Similarity, GeometryError> {
        assert_eq!(src.len(), dst.len());
        let n = src.len() as f64;
        let mean = |pts: &[[f64; 2]]| {
            pts.iter()
                .fold([0.0, 0.0], |m, p| [m[0] + p[0] / n, m[1] + p[1] / n])
        };
        let ms = mean(src);
        let md = mean(dst);
        let mut dot = 0.0; // sum of <src', dst'>
        let mut cross = 0.0; // sum of src' x dst'
        let mut norm2 = 0.0;
        for (p, q) in src.iter().zip(dst) {
            let (px, py) = (p[0] - ms[0], p[1] - ms[1]);
            let (qx, qy) = (q[0] - md[0], q[1] - md[1]);
            dot += px * qx + py * qy;
            cross += px * qy - py * qx;
            norm2 += px * px + py * py;
        }
        if norm2 <= 1e-12 {
            return Err(GeometryError::AlignmentFailure(
                "source landmarks coincident".into(),
            ));
        }
        let a = dot / norm2;
        let b = cross / norm2;
        let tx = md[0] - (a * ms[0] - b * ms[1]);
        let ty = md[1] - (b * ms[0] + a * ms[1]);
        Ok(Similarity { a, b, tx, ty })
    }
}

/// Resamples `image` under the least-squares similarity mapping `lm` onto
/// `template`, producing the 230x230 aligned frame and the transformed
/// landmarks.
pub fn similarity_align(
    image: &GrayImage,
    lm: &Landmarks5,
    template: &Landmarks5,
) -> Result<(GrayImage, Landmarks5), GeometryError> {
    lm.validate()?;
    template.validate()?;
    let t = Similarity::fit(&lm.points, &template.points)?;
    let inv = t.inverse();
    let out = GrayImage::from_fn(ALIGNED_SIZE, ALIGNED_SIZE, |y, x| {
        let src = inv.apply([x as f64, y as f64]);
        image.sample_or(src[0] as f32, src[1] as f32, 0.0)
    });
    let mut mapped = [[0.0; 2]; 5];
    for (dst, src) in mapped.iter_mut().zip(&lm.points) {
        *dst = t.apply(*src);
    }
    Ok((out, Landmarks5::new(mapped)))
}

/// Fixed-offset 165x120 crop of the aligned frame at the default origin.
pub fn crop_holistic(aligned: &GrayImage) -> Result<GrayImage, GeometryError> {
    crop_holistic_at(aligned, DEFAULT_CROP_ORIGIN)
}

/// Crop with an explicit origin (x, y); pixel (0,0) of the output equals
/// input (y, x).
pub fn crop_holistic_at(
    aligned: &GrayImage,
    origin: (usize, usize),
) -> Result<GrayImage, GeometryError> {
    if aligned.height() != ALIGNED_SIZE || aligned.width() != ALIGNED_SIZE {
        return Err(GeometryError::Dimension {
            context: "crop_holistic input",
            expected_h: ALIGNED_SIZE,
            expected_w: ALIGNED_SIZE,
            got_h: aligned.height(),
            got_w: aligned.width(),
        });
    }
    let (ox, oy) = origin;
    if ox + HOLISTIC_W > ALIGNED_SIZE || oy + HOLISTIC_H > ALIGNED_SIZE {
        return Err(GeometryError::Dimension {
            context: "crop_holistic origin",
            expected_h: ALIGNED_SIZE - HOLISTIC_H,
            expected_w: ALIGNED_SIZE - HOLISTIC_W,
            got_h: oy,
            got_w: ox,
        });
    }
    Ok(GrayImage::from_fn(HOLISTIC_H, HOLISTIC_W, |y, x| {
        aligned.get(oy + y, ox + x)
    }))
}

/// Projected 2D centers of the selected patch landmarks.
pub fn patch_centers(
    cam: &CameraFit,
    mesh: &GenericMesh,
    selection: &[usize; 6],
) -> Result<[[f64; 2]; 6], GeometryError> {
    let mut centers = [[0.0; 2]; 6];
    for (c, &sel) in centers.iter_mut().zip(selection) {
        if sel >= mesh.patch_landmarks9.len() {
            return Err(GeometryError::MeshInvalid(format!(
                "patch selection index {sel} out of range"
            )));
        }
        let v = mesh.vertices[mesh.patch_landmarks9[sel]];
        *c = project_point(cam, v);
    }
    Ok(centers)
}

/// Crops a 100x100 patch centered on each selected projected landmark.
///
/// Crops are clamped at image borders; out-of-image area is filled with 0.
/// A patch whose center lies outside the image by more than half the patch
/// side is rejected.
pub fn sample_patches(
    aligned: &GrayImage,
    cam: &CameraFit,
    mesh: &GenericMesh,
    selection: &[usize; 6],
) -> Result<Vec<GrayImage>, GeometryError> {
    if aligned.height() != ALIGNED_SIZE || aligned.width() != ALIGNED_SIZE {
        return Err(GeometryError::Dimension {
            context: "sample_patches input",
            expected_h: ALIGNED_SIZE,
            expected_w: ALIGNED_SIZE,
            got_h: aligned.height(),
            got_w: aligned.width(),
        });
    }
    let centers = patch_centers(cam, mesh, selection)?;
    let half = (PATCH_SIZE / 2) as f64;
    let mut patches = Vec::with_capacity(6);
    for (index, c) in centers.iter().enumerate() {
        let (cx, cy) = (c[0], c[1]);
        let (w, h) = (aligned.width() as f64, aligned.height() as f64);
        if cx < -half || cx > w - 1.0 + half || cy < -half || cy > h - 1.0 + half {
            return Err(GeometryError::PatchOutOfFrame {
                index,
                center: (cx, cy),
            });
        }
        let ox = cx.round() as i64 - half as i64;
        let oy = cy.round() as i64 - half as i64;
        patches.push(GrayImage::from_fn(PATCH_SIZE, PATCH_SIZE, |y, x| {
            let sy = oy + y as i64;
            let sx = ox + x as i64;
            if sy < 0 || sx < 0 || sy >= aligned.height() as i64 || sx >= aligned.width() as i64 {
                0.0
            } else {
                aligned.get(sy as usize, sx as usize)
            }
        }));
    }
    Ok(patches)
}

/// The eight modality inputs for one face image.
#[derive(Debug, Clone)]
pub struct ModalityBundle {
    pub holistic: GrayImage,
    pub frontal: GrayImage,
    pub patches: Vec<GrayImage>,
}

/// End-to-end geometry configuration: template, crop origin, patch
/// selection, and frontalization policy.
#[derive(Debug, Clone)]
pub struct GeometryPipeline {
    pub template: Landmarks5,
    pub crop_origin: (usize, usize),
    pub patch_selection: [usize; 6],
    pub frontal: FrontalizeParams,
    /// Substitute the holistic crop when frontalization is unreliable.
    pub frontal_fallback: bool,
}

impl Default for GeometryPipeline {
    fn default() -> Self {
        GeometryPipeline {
            template: default_template(),
            crop_origin: DEFAULT_CROP_ORIGIN,
            patch_selection: DEFAULT_PATCH_SELECTION,
            frontal: FrontalizeParams::default(),
            frontal_fallback: true,
        }
    }
}

impl GeometryPipeline {
    /// Runs alignment, cropping, camera fitting, patch sampling, and
    /// frontalization. Returns the bundle and whether the frontal modality
    /// fell back to the holistic crop.
    pub fn run(
        &self,
        image: &GrayImage,
        lm: &Landmarks5,
        mesh: &GenericMesh,
    ) -> Result<(ModalityBundle, bool), GeometryError> {
        let (aligned, aligned_lm) = similarity_align(image, lm, &self.template)?;
        let holistic = crop_holistic_at(&aligned, self.crop_origin)?;
        let cam = fit_camera(&aligned_lm, mesh)?;
        let patches = sample_patches(&aligned, &cam, mesh, &self.patch_selection)?;
        let (frontal, fell_back) = match frontalize(&aligned, &cam, mesh, &self.frontal) {
            Ok(img) => (img, false),
            Err(GeometryError::FrontalizationUnreliable { .. }) if self.frontal_fallback => {
                (holistic.clone(), true)
            }
            Err(e) => return Err(e),
        };
        Ok((
            ModalityBundle {
                holistic,
                frontal,
                patches,
            },
            fell_back,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(h: usize, w: usize) -> GrayImage {
        GrayImage::from_fn(h, w, |y, x| {
            0.5 + 0.3 * ((x as f32) / w as f32 - 0.5) + 0.2 * ((y as f32) / h as f32 - 0.5)
        })
    }

    #[test]
    fn align_identity_when_landmarks_match_template() {
        let template = default_template();
        let img = gradient_image(ALIGNED_SIZE, ALIGNED_SIZE);
        let (aligned, mapped) = similarity_align(&img, &template, &template).unwrap();
        for y in (0..ALIGNED_SIZE).step_by(17) {
            for x in (0..ALIGNED_SIZE).step_by(13) {
                assert!((aligned.get(y, x) - img.get(y, x)).abs() < 1e-5);
            }
        }
        for (m, t) in mapped.points.iter().zip(&template.points) {
            assert!((m[0] - t[0]).abs() < 1e-9 && (m[1] - t[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn align_output_is_always_230() {
        let template = default_template();
        let img = gradient_image(97, 143);
        let lm = Landmarks5::new([
            [30.0, 40.0],
            [70.0, 42.0],
            [50.0, 60.0],
            [35.0, 80.0],
            [65.0, 81.0],
        ]);
        let (aligned, _) = similarity_align(&img, &lm, &template).unwrap();
        assert_eq!(aligned.height(), ALIGNED_SIZE);
        assert_eq!(aligned.width(), ALIGNED_SIZE);
    }

    #[test]
    fn align_recovers_synthesized_transform() {
        let template = default_template();
        // lm = T(template); the fitted transform must equal T^-1.
        let t = Similarity {
            a: 1.3 * (0.2f64).cos(),
            b: 1.3 * (0.2f64).sin(),
            tx: 12.0,
            ty: -7.0,
        };
        let lm = Landmarks5::new(template.points.map(|p| t.apply(p)));
        let fitted = Similarity::fit(&lm.points, &template.points).unwrap();
        let tinv = t.inverse();
        for p in &lm.points {
            let a = fitted.apply(*p);
            let b = tinv.apply(*p);
            assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn align_is_idempotent_at_fixed_point() {
        let template = default_template();
        let img = gradient_image(ALIGNED_SIZE, ALIGNED_SIZE);
        let (aligned, lm1) = similarity_align(&img, &template, &template).unwrap();
        let (_, lm2) = similarity_align(&aligned, &lm1, &template).unwrap();
        for (a, b) in lm1.points.iter().zip(&lm2.points) {
            assert!((a[0] - b[0]).hypot(a[1] - b[1]) < 1e-6);
        }
    }

    #[test]
    fn align_rejects_degenerate_landmarks() {
        let img = gradient_image(50, 50);
        let coincident = Landmarks5::new([[10.0, 10.0]; 5]);
        assert!(matches!(
            similarity_align(&img, &coincident, &default_template()),
            Err(GeometryError::AlignmentFailure(_))
        ));
        let collinear = Landmarks5::new([
            [0.0, 0.0],
            [1.0, 1.0],
            [2.0, 2.0],
            [3.0, 3.0],
            [4.0, 4.0],
        ]);
        assert!(matches!(
            similarity_align(&img, &collinear, &default_template()),
            Err(GeometryError::AlignmentFailure(_))
        ));
    }

    #[test]
    fn crop_constant_image() {
        let img = GrayImage::constant(ALIGNED_SIZE, ALIGNED_SIZE, 0.7);
        let crop = crop_holistic(&img).unwrap();
        assert_eq!(crop.height(), HOLISTIC_H);
        assert_eq!(crop.width(), HOLISTIC_W);
        assert!(crop.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn crop_origin_definition() {
        let img = gradient_image(ALIGNED_SIZE, ALIGNED_SIZE);
        let (ox, oy) = (40, 30);
        let crop = crop_holistic_at(&img, (ox, oy)).unwrap();
        assert_eq!(crop.get(0, 0), img.get(oy, ox));
        assert_eq!(crop.get(10, 3), img.get(oy + 10, ox + 3));
    }

    #[test]
    fn crop_rejects_wrong_input_size() {
        let img = GrayImage::new(100, 100);
        assert!(matches!(
            crop_holistic(&img),
            Err(GeometryError::Dimension { .. })
        ));
    }

    #[test]
    fn patches_have_fixed_count_and_size() {
        let mesh = synthetic_face_mesh();
        let template = default_template();
        let img = gradient_image(ALIGNED_SIZE, ALIGNED_SIZE);
        let cam = fit_camera(&template, &mesh).unwrap();
        let patches = sample_patches(&img, &cam, &mesh, &DEFAULT_PATCH_SELECTION).unwrap();
        assert_eq!(patches.len(), 6);
        for p in &patches {
            assert_eq!(p.height(), PATCH_SIZE);
            assert_eq!(p.width(), PATCH_SIZE);
        }
    }

    #[test]
    fn corner_patch_clamps_with_zero_fill() {
        let mesh = synthetic_face_mesh();
        let img = gradient_image(ALIGNED_SIZE, ALIGNED_SIZE);
        // Camera squashing everything to the image corner (0, 0).
        let cam = CameraFit::new([[0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]]);
        let patches = sample_patches(&img, &cam, &mesh, &DEFAULT_PATCH_SELECTION).unwrap();
        let p = &patches[0];
        // Upper-left quadrant comes from outside the image: zero fill.
        assert_eq!(p.get(0, 0), 0.0);
        assert_eq!(p.get(49, 49), 0.0);
        // Lower-right quadrant overlaps the image at (0,0)...(49,49).
        assert_eq!(p.get(50, 50), img.get(0, 0));
        assert_eq!(p.get(99, 99), img.get(49, 49));
    }

    #[test]
    fn far_out_of_frame_patch_is_rejected() {
        let mesh = synthetic_face_mesh();
        let img = gradient_image(ALIGNED_SIZE, ALIGNED_SIZE);
        let cam = CameraFit::new([[0.0, 0.0, 0.0, -300.0], [0.0, 0.0, 0.0, 115.0]]);
        assert!(matches!(
            sample_patches(&img, &cam, &mesh, &DEFAULT_PATCH_SELECTION),
            Err(GeometryError::PatchOutOfFrame { .. })
        ));
    }

    #[test]
    fn mirrored_landmarks_give_mirrored_patch_centers() {
        // Patch centers under the mirrored landmark set equal the
        // mirrored centers of the original, pairing left/right landmarks.
        let mesh = synthetic_face_mesh();
        let lm = Landmarks5::new([
            [80.0, 93.0],
            [152.0, 89.0],
            [118.0, 135.0],
            [88.0, 163.0],
            [146.0, 160.0],
        ]);
        let cam = fit_camera(&lm, &mesh).unwrap();
        let mirrored_lm = lm.mirrored(ALIGNED_SIZE);
        let cam_m = fit_camera(&mirrored_lm, &mesh).unwrap();
        let selection = DEFAULT_PATCH_SELECTION;
        let mirrored_selection: [usize; 6] = selection.map(|i| PATCH_MIRROR_MAP[i]);
        let centers = patch_centers(&cam, &mesh, &selection).unwrap();
        let centers_m = patch_centers(&cam_m, &mesh, &mirrored_selection).unwrap();
        let w = (ALIGNED_SIZE - 1) as f64;
        for (c, cm) in centers.iter().zip(&centers_m) {
            assert!(
                ((w - c[0]) - cm[0]).abs() < 1e-6,
                "x: {} vs {}",
                w - c[0],
                cm[0]
            );
            assert!((c[1] - cm[1]).abs() < 1e-6, "y: {} vs {}", c[1], cm[1]);
        }
    }

    #[test]
    fn pipeline_produces_full_bundle() {
        let mesh = synthetic_face_mesh();
        let img = gradient_image(120, 110);
        let lm = Landmarks5::new([
            [35.0, 45.0],
            [75.0, 45.0],
            [55.0, 65.0],
            [40.0, 82.0],
            [70.0, 82.0],
        ]);
        let pipeline = GeometryPipeline::default();
        let (bundle, fell_back) = pipeline.run(&img, &lm, &mesh).unwrap();
        assert!(!fell_back);
        assert_eq!(bundle.holistic.height(), HOLISTIC_H);
        assert_eq!(bundle.frontal.height(), HOLISTIC_H);
        assert_eq!(bundle.frontal.width(), HOLISTIC_W);
        assert_eq!(bundle.patches.len(), 6);
        assert!(bundle.frontal.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mirrored_landmarks_swap_sides() {
        let lm = Landmarks5::new([
            [10.0, 20.0],
            [40.0, 21.0],
            [25.0, 35.0],
            [15.0, 50.0],
            [35.0, 51.0],
        ]);
        let m = lm.mirrored(100);
        assert_eq!(m.points[LM_LEFT_EYE], [99.0 - 40.0, 21.0]);
        assert_eq!(m.points[LM_RIGHT_EYE], [99.0 - 10.0, 20.0]);
        assert_eq!(m.points[LM_LEFT_MOUTH], [99.0 - 35.0, 51.0]);
    }
}
