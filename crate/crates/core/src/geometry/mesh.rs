//! Generic 3D face mesh: text format I/O and a procedural stand-in.
//!
//! Model coordinates follow the image convention: x to the right, y down,
//! z toward the viewer. Five anchor vertices correspond to the
//! [`Landmarks5`](super::Landmarks5) order; nine patch-landmark vertices
//! spread across the face and are mirror-closed left/right.

use std::fmt::Write as _;
use std::path::Path;

use super::GeometryError;

/// Triangle mesh with alignment anchors and patch landmarks.
#[derive(Debug, Clone)]
pub struct GenericMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
    /// Vertices matching the five 2D landmarks, same order.
    pub anchor5: [usize; 5],
    /// Nine uniformly spread landmark vertices. Order: left eye, right eye,
    /// nose center, mouth center, left cheek, right cheek, left contour,
    /// right contour, forehead.
    pub patch_landmarks9: [usize; 9],
}

/// Default six-of-nine patch selection: both eye regions, nose center,
/// mouth center, and the two left-half cheek/contour landmarks (right-half
/// duplicates are dropped; horizontal flips cover them).
pub const DEFAULT_PATCH_SELECTION: [usize; 6] = [0, 1, 2, 3, 4, 6];

/// Left/right pairing of the nine patch landmarks under mirroring.
pub const PATCH_MIRROR_MAP: [usize; 9] = [1, 0, 2, 3, 5, 4, 7, 6, 8];

impl GenericMesh {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let nv = self.vertices.len();
        for t in &self.triangles {
            if t.iter().any(|&i| i >= nv) {
                return Err(GeometryError::MeshInvalid(format!(
                    "triangle index out of range: {t:?}"
                )));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(GeometryError::MeshInvalid(format!(
                    "degenerate triangle: {t:?}"
                )));
            }
        }
        for &i in self.anchor5.iter().chain(self.patch_landmarks9.iter()) {
            if i >= nv {
                return Err(GeometryError::MeshInvalid(format!(
                    "landmark vertex index {i} out of range"
                )));
            }
        }
        Ok(())
    }

    pub fn anchor_points(&self) -> [[f64; 3]; 5] {
        self.anchor5.map(|i| self.vertices[i])
    }

    /// Parses the text format: `V T` header, V vertex lines `x y z`,
    /// T triangle lines `i j k`, then `anchors i1..i5` and `patchpts i1..i9`.
    pub fn parse(text: &str) -> Result<GenericMesh, GeometryError> {
        let err = |line: usize, msg: &str| GeometryError::MeshFormat {
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate();
        let (ln, header) = lines
            .next()
            .ok_or_else(|| err(1, "empty mesh file"))?;
        let mut it = header.split_whitespace();
        let nv: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(ln + 1, "bad vertex count"))?;
        let nt: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(ln + 1, "bad triangle count"))?;

        let mut vertices = Vec::with_capacity(nv);
        for _ in 0..nv {
            let (ln, line) = lines.next().ok_or_else(|| err(0, "missing vertex line"))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| err(ln + 1, "bad vertex coordinate"))?;
            if vals.len() != 3 {
                return Err(err(ln + 1, "vertex line needs 3 values"));
            }
            vertices.push([vals[0], vals[1], vals[2]]);
        }
        let mut triangles = Vec::with_capacity(nt);
        for _ in 0..nt {
            let (ln, line) = lines.next().ok_or_else(|| err(0, "missing triangle line"))?;
            let vals: Vec<usize> = line
                .split_whitespace()
                .map(|s| s.parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| err(ln + 1, "bad triangle index"))?;
            if vals.len() != 3 {
                return Err(err(ln + 1, "triangle line needs 3 indices"));
            }
            triangles.push([vals[0], vals[1], vals[2]]);
        }
        let mut anchor5 = None;
        let mut patch9 = None;
        for (ln, line) in lines {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("anchors") => {
                    let vals: Vec<usize> = it
                        .map(|s| s.parse::<usize>())
                        .collect::<Result<_, _>>()
                        .map_err(|_| err(ln + 1, "bad anchor index"))?;
                    let arr: [usize; 5] = vals
                        .try_into()
                        .map_err(|_| err(ln + 1, "anchors line needs exactly 5 indices"))?;
                    anchor5 = Some(arr);
                }
                Some("patchpts") => {
                    let vals: Vec<usize> = it
                        .map(|s| s.parse::<usize>())
                        .collect::<Result<_, _>>()
                        .map_err(|_| err(ln + 1, "bad patch landmark index"))?;
                    let arr: [usize; 9] = vals
                        .try_into()
                        .map_err(|_| err(ln + 1, "patchpts line needs exactly 9 indices"))?;
                    patch9 = Some(arr);
                }
                Some(other) => {
                    return Err(err(ln + 1, &format!("unexpected directive '{other}'")))
                }
                None => {}
            }
        }
        let mesh = GenericMesh {
            vertices,
            triangles,
            anchor5: anchor5.ok_or_else(|| err(0, "missing anchors line"))?,
            patch_landmarks9: patch9.ok_or_else(|| err(0, "missing patchpts line"))?,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {}", self.vertices.len(), self.triangles.len());
        for v in &self.vertices {
            let _ = writeln!(s, "{} {} {}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
        }
        let _ = writeln!(
            s,
            "anchors {}",
            self.anchor5.map(|i| i.to_string()).join(" ")
        );
        let _ = writeln!(
            s,
            "patchpts {}",
            self.patch_landmarks9.map(|i| i.to_string()).join(" ")
        );
        s
    }

    pub fn read_file(path: &Path) -> Result<GenericMesh, GeometryError> {
        let text = std::fs::read_to_string(path).map_err(|source| GeometryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        GenericMesh::parse(&text)
    }

    pub fn write_file(&self, path: &Path) -> Result<(), GeometryError> {
        std::fs::write(path, self.to_text()).map_err(|source| GeometryError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

// Grid resolution of the procedural mesh.
const ROWS: usize = 24;
const COLS: usize = 24;

/// Procedural half-ellipsoid face mesh (front half of an ellipsoid with
/// semi-axes 1.0 x 1.3 x 0.9), exactly symmetric about x = 0.
///
/// Anchors sit at plausible eye/nose/mouth positions on the surface; the
/// nine patch landmarks are mirror-closed so flipped inputs map onto
/// mirrored patch centers.
pub fn synthetic_face_mesh() -> GenericMesh {
    let (a, b, c) = (1.0, 1.3, 0.9);
    let mut vertices = Vec::new();
    vertices.push([0.0, -b, 0.0]); // top pole
    for i in 1..ROWS {
        let theta = std::f64::consts::PI * i as f64 / ROWS as f64;
        let y = -b * theta.cos();
        let rho = theta.sin();
        // Build the right half and mirror it so symmetry is exact in f64.
        let mut row = vec![[0.0f64; 3]; COLS + 1];
        for j in 0..=COLS / 2 {
            let phi = std::f64::consts::PI * j as f64 / COLS as f64;
            let x = if j == COLS / 2 { 0.0 } else { a * rho * phi.cos() };
            let z = c * rho * phi.sin();
            row[j] = [x, y, z];
            row[COLS - j] = [-x, y, z];
        }
        vertices.extend(row);
    }
    let south = vertices.len();
    vertices.push([0.0, b, 0.0]); // chin pole

    let v = |i: usize, j: usize| -> usize {
        debug_assert!((1..ROWS).contains(&i));
        1 + (i - 1) * (COLS + 1) + j
    };

    let mut triangles = Vec::new();
    for j in 0..COLS {
        triangles.push([0, v(1, j), v(1, j + 1)]);
    }
    for i in 1..ROWS - 1 {
        for j in 0..COLS {
            triangles.push([v(i, j), v(i + 1, j), v(i + 1, j + 1)]);
            triangles.push([v(i, j), v(i + 1, j + 1), v(i, j + 1)]);
        }
    }
    for j in 0..COLS {
        triangles.push([south, v(ROWS - 1, j + 1), v(ROWS - 1, j)]);
    }

    let anchor5 = [
        v(10, 15), // left eye (image left: negative x)
        v(10, 9),  // right eye
        v(12, 12), // nose tip (0, 0, c)
        v(16, 14), // left mouth corner
        v(16, 10), // right mouth corner
    ];
    let patch_landmarks9 = [
        v(10, 15), // left eye
        v(10, 9),  // right eye
        v(12, 12), // nose center
        v(16, 12), // mouth center
        v(13, 16), // left cheek
        v(13, 8),  // right cheek
        v(11, 20), // left contour
        v(11, 4),  // right contour
        v(6, 12),  // forehead
    ];
    let mesh = GenericMesh {
        vertices,
        triangles,
        anchor5,
        patch_landmarks9,
    };
    debug_assert!(mesh.validate().is_ok());
    mesh
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_mesh_is_valid_and_symmetric() {
        let mesh = synthetic_face_mesh();
        mesh.validate().unwrap();
        // Anchor symmetry: eyes and mouth corners mirror exactly.
        let p = mesh.anchor_points();
        assert_eq!(p[0][0], -p[1][0]);
        assert_eq!(p[0][1], p[1][1]);
        assert_eq!(p[0][2], p[1][2]);
        assert_eq!(p[3][0], -p[4][0]);
        // Nose tip on the centerline, front-most point.
        assert_eq!(p[2][0], 0.0);
        assert!(p[2][2] > 0.8);
        // Patch landmarks mirror per PATCH_MIRROR_MAP.
        for (k, &m) in PATCH_MIRROR_MAP.iter().enumerate() {
            let a = mesh.vertices[mesh.patch_landmarks9[k]];
            let b = mesh.vertices[mesh.patch_landmarks9[m]];
            assert_eq!(a[0], -b[0]);
            assert_eq!(a[1], b[1]);
            assert_eq!(a[2], b[2]);
        }
    }

    #[test]
    fn mesh_text_round_trip() {
        let mesh = synthetic_face_mesh();
        let text = mesh.to_text();
        let back = GenericMesh::parse(&text).unwrap();
        assert_eq!(back.vertices.len(), mesh.vertices.len());
        assert_eq!(back.triangles, mesh.triangles);
        assert_eq!(back.anchor5, mesh.anchor5);
        assert_eq!(back.patch_landmarks9, mesh.patch_landmarks9);
        for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn parse_rejects_malformed_input() {
        assert!(GenericMesh::parse("").is_err());
        assert!(GenericMesh::parse("1 0\n0 0 0\nanchors 0 0 0 0 0\npatchpts 0 0 0 0 0 0 0 0").is_err());
        // Degenerate triangle.
        let bad = "3 1\n0 0 0\n1 0 0\n0 1 0\n0 0 1\nanchors 0 1 2 0 1\npatchpts 0 1 2 0 1 2 0 1 2";
        assert!(matches!(
            GenericMesh::parse(bad),
            Err(GeometryError::MeshInvalid(_))
        ));
    }
}
