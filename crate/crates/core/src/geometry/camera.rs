//! Affine orthographic camera fitting.

use nalgebra::{DMatrix, DVector};

use super::{GenericMesh, GeometryError, Landmarks5};

/// 2x4 affine camera mapping homogeneous 3D model points to 2D pixels,
/// plus the RMS reprojection error of the fit.
#[derive(Debug, Clone, Copy)]
pub struct CameraFit {
    pub p: [[f64; 4]; 2],
    pub residual: f64,
}

impl CameraFit {
    pub fn new(p: [[f64; 4]; 2]) -> Self {
        CameraFit { p, residual: 0.0 }
    }
}

/// Least-squares fit of the affine camera mapping the mesh anchors onto the
/// five 2D landmarks.
pub fn fit_camera(lm: &Landmarks5, mesh: &GenericMesh) -> Result<CameraFit, GeometryError> {
    lm.validate()
        .map_err(|_| GeometryError::FitFailure("degenerate 2D landmark configuration".into()))?;
    let anchors = mesh.anchor_points();
    let design = DMatrix::from_fn(5, 4, |r, c| if c < 3 { anchors[r][c] } else { 1.0 });
    let svd = design.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-10 * smax).count();
    if rank < 4 {
        return Err(GeometryError::FitFailure(format!(
            "rank-deficient anchor design matrix (rank {rank})"
        )));
    }
    let mut p = [[0.0; 4]; 2];
    for (axis, row) in p.iter_mut().enumerate() {
        let target = DVector::from_fn(5, |r, _| lm.points[r][axis]);
        let sol = svd
            .solve(&target, 1e-12)
            .map_err(|e| GeometryError::FitFailure(e.to_string()))?;
        for (c, v) in row.iter_mut().enumerate() {
            *v = sol[c];
        }
    }
    let cam = CameraFit { p, residual: 0.0 };
    let mut sq = 0.0;
    for (anchor, lmp) in anchors.iter().zip(&lm.points) {
        let proj = project_point(&cam, *anchor);
        sq += (proj[0] - lmp[0]).powi(2) + (proj[1] - lmp[1]).powi(2);
    }
    Ok(CameraFit {
        p,
        residual: (sq / 5.0).sqrt(),
    })
}

#[inline]
pub fn project_point(cam: &CameraFit, v: [f64; 3]) -> [f64; 2] {
    let h = [v[0], v[1], v[2], 1.0];
    let mut out = [0.0; 2];
    for (o, row) in out.iter_mut().zip(&cam.p) {
        *o = row.iter().zip(&h).map(|(a, b)| a * b).sum();
    }
    out
}

pub fn project_points(cam: &CameraFit, points: &[[f64; 3]]) -> Vec<[f64; 2]> {
    points.iter().map(|&v| project_point(cam, v)).collect()
}

#[cfg(test)]
mod tests {
    use super::super::synthetic_face_mesh;
    use super::*;

    fn known_camera() -> CameraFit {
        CameraFit::new([[52.0, -6.0, 11.0, 115.0], [4.0, 55.0, -3.0, 118.0]])
    }

    #[test]
    fn fit_recovers_synthesized_camera() {
        let mesh = synthetic_face_mesh();
        let cam = known_camera();
        let projected = project_points(&cam, &mesh.anchor_points());
        let lm = Landmarks5::new([
            projected[0].into(),
            projected[1].into(),
            projected[2].into(),
            projected[3].into(),
            projected[4].into(),
        ]);
        let fitted = fit_camera(&lm, &mesh).unwrap();
        assert!(fitted.residual < 1e-9, "residual {}", fitted.residual);
        for (a, b) in project_points(&fitted, &mesh.anchor_points())
            .iter()
            .zip(&lm.points)
        {
            assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_rows_project_planar_anchors_to_xy() {
        // Anchors on z = 0 with identity-like rows: projections equal (x, y).
        let mesh = GenericMesh {
            vertices: vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [1.0, 1.0, 0.0],
                [0.5, 2.0, 0.0],
                [0.0, 0.0, 1.0],
            ],
            triangles: vec![[0, 1, 2]],
            anchor5: [0, 1, 2, 3, 4],
            patch_landmarks9: [0, 1, 2, 3, 4, 0, 1, 2, 3],
        };
        let cam = CameraFit::new([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]);
        for (&i, expect) in mesh.anchor5.iter().zip([
            [0.0, 0.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [1.0, 1.0],
            [0.5, 2.0],
        ]) {
            assert_eq!(project_point(&cam, mesh.vertices[i]), expect);
        }
    }

    #[test]
    fn zero_and_translation_cameras() {
        let zero = CameraFit::new([[0.0; 4]; 2]);
        assert_eq!(project_point(&zero, [3.0, -2.0, 5.0]), [0.0, 0.0]);
        let t = CameraFit::new([[1.0, 0.0, 0.0, 7.0], [0.0, 1.0, 0.0, -2.0]]);
        assert_eq!(project_point(&t, [3.0, 4.0, 9.0]), [10.0, 2.0]);
    }

    #[test]
    fn projection_is_linear_in_homogeneous_combinations() {
        let cam = known_camera();
        let p = [0.3, -0.7, 0.5];
        let q = [-0.2, 0.9, 0.4];
        let alpha = 0.35;
        // Affine combination keeps the homogeneous coordinate consistent.
        let mix = [
            alpha * p[0] + (1.0 - alpha) * q[0],
            alpha * p[1] + (1.0 - alpha) * q[1],
            alpha * p[2] + (1.0 - alpha) * q[2],
        ];
        let lhs = project_point(&cam, mix);
        let pp = project_point(&cam, p);
        let pq = project_point(&cam, q);
        for axis in 0..2 {
            let rhs = alpha * pp[axis] + (1.0 - alpha) * pq[axis];
            assert!((lhs[axis] - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn coincident_landmarks_fail_fit() {
        let mesh = synthetic_face_mesh();
        let lm = Landmarks5::new([[100.0, 100.0]; 5]);
        assert!(matches!(
            fit_camera(&lm, &mesh),
            Err(GeometryError::FitFailure(_))
        ));
    }

    #[test]
    fn nine_patch_landmarks_match_direct_matrix_products() {
        let mesh = synthetic_face_mesh();
        let cam = known_camera();
        let pts: Vec<[f64; 3]> = mesh
            .patch_landmarks9
            .iter()
            .map(|&i| mesh.vertices[i])
            .collect();
        let projected = project_points(&cam, &pts);
        for (proj, v) in projected.iter().zip(&pts) {
            let u = cam.p[0][0] * v[0] + cam.p[0][1] * v[1] + cam.p[0][2] * v[2] + cam.p[0][3];
            let w = cam.p[1][0] * v[0] + cam.p[1][1] * v[1] + cam.p[1][2] * v[2] + cam.p[1][3];
            assert!((proj[0] - u).abs() < 1e-12 && (proj[1] - w).abs() < 1e-12);
        }
    }
}
