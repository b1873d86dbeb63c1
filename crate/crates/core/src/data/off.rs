//! OFF mesh parsing, area-weighted surface sampling and a class/split directory loader.

use std::io::BufRead;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{normalize, Dataset, PointCloud};
use crate::error::{Error as CrateError, Result};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OffError {
    #[error("line {line}: expected OFF header")]
    MissingHeader { line: usize },
    #[error("line {line}: malformed counts: {detail}")]
    BadCounts { line: usize, detail: String },
    #[error("line {line}: malformed vertex: {detail}")]
    BadVertex { line: usize, detail: String },
    #[error("line {line}: malformed face: {detail}")]
    BadFace { line: usize, detail: String },
    #[error("line {line}: vertex index {index} out of range for {vertices} vertices")]
    IndexOutOfRange { line: usize, index: usize, vertices: usize },
    #[error("truncated file: expected {expected} {what}, found {found}")]
    Truncated { what: &'static str, expected: usize, found: usize },
    #[error("line {line}: read error: {detail}")]
    Io { line: usize, detail: String },
}

/// Triangle mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn triangle_area(&self, f: usize) -> f64 {
        let [a, b, c] = self.faces[f].map(|i| self.vertices[i]);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let x = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
        0.5 * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
    }
}

/// Non-empty, comment-stripped lines with their 1-based numbers.
struct Lines<R> {
    inner: std::io::Lines<R>,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn next_content(&mut self) -> std::result::Result<Option<(usize, String)>, OffError> {
        for l in self.inner.by_ref() {
            self.line += 1;
            let l = l.map_err(|e| OffError::Io {
                line: self.line,
                detail: e.to_string(),
            })?;
            let body = l.split('#').next().unwrap_or("").trim();
            if !body.is_empty() {
                return Ok(Some((self.line, body.to_owned())));
            }
        }
        Ok(None)
    }
}

/// Upper bound on preallocation so hostile counts cannot exhaust memory up front.
const PREALLOC_CAP: usize = 1 << 16;

/// Parses an OFF mesh, fan-triangulating polygons with more than three vertices.
///
/// Accepts the common variant where the counts follow `OFF` on the header line, with or
/// without a separating space (`OFF8 6 0`).
pub fn parse_off<R: BufRead>(reader: R) -> std::result::Result<TriMesh, OffError> {
    let mut lines = Lines {
        inner: reader.lines(),
        line: 0,
    };
    let Some((hline, header)) = lines.next_content()? else {
        return Err(OffError::MissingHeader { line: 1 });
    };
    let Some(rest) = header.strip_prefix("OFF") else {
        return Err(OffError::MissingHeader { line: hline });
    };
    let rest = rest.trim();
    let (cline, counts) = if rest.is_empty() {
        lines.next_content()?.ok_or(OffError::Truncated {
            what: "count lines",
            expected: 1,
            found: 0,
        })?
    } else {
        (hline, rest.to_owned())
    };
    let nums: Vec<&str> = counts.split_whitespace().collect();
    if nums.len() < 2 {
        return Err(OffError::BadCounts {
            line: cline,
            detail: format!("need vertex and face counts, got {counts:?}"),
        });
    }
    let parse_count = |s: &str| {
        s.parse::<usize>().map_err(|_| OffError::BadCounts {
            line: cline,
            detail: format!("{s:?} is not a count"),
        })
    };
    let nv = parse_count(nums[0])?;
    let nf = parse_count(nums[1])?;

    let mut vertices = Vec::with_capacity(nv.min(PREALLOC_CAP));
    for found in 0..nv {
        let (line, text) = lines.next_content()?.ok_or(OffError::Truncated {
            what: "vertices",
            expected: nv,
            found,
        })?;
        let mut coords = [0.0f64; 3];
        let mut toks = text.split_whitespace();
        for c in &mut coords {
            let t = toks.next().ok_or_else(|| OffError::BadVertex {
                line,
                detail: format!("need 3 coordinates in {text:?}"),
            })?;
            *c = t.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| OffError::BadVertex {
                line,
                detail: format!("{t:?} is not a finite number"),
            })?;
        }
        vertices.push(coords);
    }

    let mut faces = Vec::with_capacity(nf.min(PREALLOC_CAP));
    for found in 0..nf {
        let (line, text) = lines.next_content()?.ok_or(OffError::Truncated {
            what: "faces",
            expected: nf,
            found,
        })?;
        let mut toks = text.split_whitespace();
        let k: usize = toks
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| OffError::BadFace {
                line,
                detail: format!("missing vertex count in {text:?}"),
            })?;
        if k < 3 {
            return Err(OffError::BadFace {
                line,
                detail: format!("polygon with {k} vertices"),
            });
        }
        let mut idx = Vec::with_capacity(k.min(PREALLOC_CAP));
        for _ in 0..k {
            let t = toks.next().ok_or_else(|| OffError::BadFace {
                line,
                detail: format!("expected {k} indices in {text:?}"),
            })?;
            let i: usize = t.parse().map_err(|_| OffError::BadFace {
                line,
                detail: format!("{t:?} is not an index"),
            })?;
            if i >= nv {
                return Err(OffError::IndexOutOfRange {
                    line,
                    index: i,
                    vertices: nv,
                });
            }
            idx.push(i);
        }
        for j in 1..k - 1 {
            faces.push([idx[0], idx[j], idx[j + 1]]);
        }
    }
    Ok(TriMesh { vertices, faces })
}

/// Area-weighted surface sample of `points` points (label 0).
///
/// Zero-area triangles are never selected; within a triangle points are uniform in
/// barycentric coordinates.
pub fn sample_mesh(mesh: &TriMesh, points: usize, seed: u64) -> Result<PointCloud> {
    let areas: Vec<f64> = (0..mesh.faces.len()).map(|f| mesh.triangle_area(f)).collect();
    let pick = WeightedIndex::new(&areas)
        .map_err(|e| CrateError::format("mesh", format!("no triangle with positive finite area ({e})")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = (0..points)
        .map(|_| {
            let [a, b, c] = mesh.faces[pick.sample(&mut rng)].map(|i| mesh.vertices[i]);
            let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            [0, 1, 2].map(|d| (a[d] + u * (b[d] - a[d]) + v * (c[d] - a[d])) as f32)
        })
        .collect();
    Ok(PointCloud { points: pts, label: 0 })
}

/// Train and test splits read from `root/<class>/{train,test}/*.off`.
#[derive(Clone, Debug)]
pub struct OffDataset {
    pub train: Dataset,
    pub test: Dataset,
    /// Class directory names, sorted; index = label.
    pub classes: Vec<String>,
}

/// Loads every OFF file below `root`, samples `points` points from each mesh and
/// normalizes the cloud. Class labels follow the sorted directory names; per-file seeds
/// derive from `seed` and the file's position.
pub fn load_off_dir(root: &Path, points: usize, seed: u64) -> Result<OffDataset> {
    let io = |path: &Path| {
        let path = path.to_owned();
        move |source| CrateError::Path { path, source }
    };
    let mut classes: Vec<String> = std::fs::read_dir(root)
        .map_err(io(root))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(CrateError::Config(format!("no class directories under {}", root.display())));
    }
    let mut splits = [Vec::new(), Vec::new()];
    let mut counter = 0u64;
    for (label, class) in classes.iter().enumerate() {
        for (s, split) in ["train", "test"].iter().enumerate() {
            let dir = root.join(class).join(split);
            if !dir.is_dir() {
                continue;
            }
            let mut files: Vec<_> = std::fs::read_dir(&dir)
                .map_err(io(&dir))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("off")))
                .collect();
            files.sort();
            for f in files {
                let file = std::fs::File::open(&f).map_err(io(&f))?;
                let mesh = parse_off(std::io::BufReader::new(file)).map_err(|e| {
                    CrateError::format("OFF file", format!("{}: {e}", f.display()))
                })?;
                let mut cloud = normalize(&sample_mesh(&mesh, points, seed.wrapping_add(counter))?);
                counter += 1;
                cloud.label = label;
                splits[s].push(cloud);
            }
        }
    }
    let [train, test] = splits;
    Ok(OffDataset {
        train: Dataset::new(train, classes.len(), points)?,
        test: Dataset::new(test, classes.len(), points)?,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const TETRA: &str = "OFF\n4 4 6\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n3 0 1 3\n3 0 2 3\n3 1 2 3\n";

    #[test]
    fn tetrahedron() {
        let m = parse_off(TETRA.as_bytes()).unwrap();
        assert_eq!(m.vertices.len(), 4);
        assert_eq!(m.faces.len(), 4);
        assert_eq!(m.faces[3], [1, 2, 3]);
    }

    #[test]
    fn glued_header_and_comments() {
        let text = "# exported\nOFF4 1 0\n0 0 0 # origin\n1 0 0\n\n1 1 0\n0 1 0\n4 0 1 2 3 255 0 0\n";
        let m = parse_off(text.as_bytes()).unwrap();
        assert_eq!(m.faces, vec![[0, 1, 2], [0, 2, 3]]);
        let spaced = parse_off("OFF 3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n".as_bytes()).unwrap();
        assert_eq!(spaced.faces.len(), 1);
    }

    #[test]
    fn distinct_errors_with_lines() {
        assert_eq!(parse_off("PLY\n".as_bytes()), Err(OffError::MissingHeader { line: 1 }));
        assert!(matches!(parse_off("OFF\nx 1 0\n".as_bytes()), Err(OffError::BadCounts { line: 2, .. })));
        assert!(matches!(
            parse_off("OFF\n3 1 0\n0 0 0\n1 0\n".as_bytes()),
            Err(OffError::BadVertex { line: 4, .. })
        ));
        assert!(matches!(
            parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n".as_bytes()),
            Err(OffError::IndexOutOfRange { line: 6, index: 7, vertices: 3 })
        ));
        assert!(matches!(
            parse_off("OFF\n3 2 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n".as_bytes()),
            Err(OffError::Truncated { what: "faces", expected: 2, found: 1 })
        ));
        assert!(matches!(
            parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n2 0 1\n".as_bytes()),
            Err(OffError::BadFace { line: 6, .. })
        ));
        assert!(matches!(
            parse_off("OFF\n1 0 0\n0 nan 0\n".as_bytes()),
            Err(OffError::BadVertex { line: 3, .. })
        ));
    }

    proptest! {
        #[test]
        fn parser_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..400)) {
            let _ = parse_off(&bytes[..]);
        }

        #[test]
        fn mutated_valid_files_never_panic(pos in 0usize..TETRA.len(), byte in any::<u8>(), cut in 0usize..TETRA.len()) {
            let mut b = TETRA.as_bytes().to_vec();
            b[pos] = byte;
            let _ = parse_off(&b[..]);
            let _ = parse_off(&TETRA.as_bytes()[..cut]);
        }
    }

    fn barycentric(p: [f64; 3], a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
        // Triangles used here lie in the z = 0 plane.
        let det = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1]);
        let l1 = ((b[1] - c[1]) * (p[0] - c[0]) + (c[0] - b[0]) * (p[1] - c[1])) / det;
        let l2 = ((c[1] - a[1]) * (p[0] - c[0]) + (a[0] - c[0]) * (p[1] - c[1])) / det;
        [l1, l2, 1.0 - l1 - l2]
    }

    #[test]
    fn single_triangle_contains_all_points() {
        let m = TriMesh {
            vertices: vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.5, 1.5, 0.0]],
            faces: vec![[0, 1, 2]],
        };
        let c = sample_mesh(&m, 1000, 3).unwrap();
        for p in &c.points {
            let l = barycentric(p.map(|v| v as f64), m.vertices[0], m.vertices[1], m.vertices[2]);
            assert!(l.iter().all(|&v| v >= -1e-6), "{l:?}");
            assert!((l.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    fn count_split(m: &TriMesh, n: usize, seed: u64, first: impl Fn([f32; 3]) -> bool) -> usize {
        sample_mesh(m, n, seed).unwrap().points.into_iter().filter(|&p| first(p)).count()
    }

    #[test]
    fn area_ratio_controls_split() {
        // Area 4.5 for x < 0 and 0.5 for x > 10.
        let m = TriMesh {
            vertices: vec![
                [-3.0, 0.0, 0.0],
                [0.0, 0.0, 0.0],
                [-3.0, 3.0, 0.0],
                [11.0, 0.0, 0.0],
                [12.0, 0.0, 0.0],
                [11.0, 1.0, 0.0],
            ],
            faces: vec![[0, 1, 2], [3, 4, 5]],
        };
        let n = 5000;
        let k = count_split(&m, n, 4, |p| p[0] <= 0.0);
        let (mean, sd) = (0.9 * n as f64, (n as f64 * 0.9 * 0.1).sqrt());
        assert!((k as f64 - mean).abs() <= 3.0 * sd, "{k}");
    }

    #[test]
    fn degenerate_triangles_are_never_chosen() {
        let m = TriMesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [5.0, 5.0, 5.0], [6.0, 6.0, 6.0]],
            faces: vec![[3, 4, 3], [0, 1, 2], [3, 3, 3], [0, 3, 4]],
        };
        // Triangle (0, 3, 4) is collinear: 3 and 4 lie on the same ray from 0.
        assert_eq!(m.triangle_area(3), 0.0);
        let c = sample_mesh(&m, 2000, 5).unwrap();
        assert!(c.points.iter().all(|p| p[2] == 0.0 && p[0] >= 0.0 && p[1] >= 0.0));
        let flat = TriMesh {
            vertices: vec![[0.0; 3]; 3],
            faces: vec![[0, 1, 2]],
        };
        assert!(sample_mesh(&flat, 10, 0).is_err());
    }

    #[test]
    fn adversarial_mesh_density() {
        // One large triangle plus many tiny ones.
        let mut vertices = vec![[0.0, 0.0, 0.0], [10.0, 0.0, 0.0], [0.0, 10.0, 0.0]];
        let mut faces = vec![[0, 1, 2]];
        for i in 0..500 {
            let x = 100.0 + i as f64;
            let b = vertices.len();
            vertices.extend([[x, 0.0, 0.0], [x + 0.1, 0.0, 0.0], [x, 0.1, 0.0]]);
            faces.push([b, b + 1, b + 2]);
        }
        let m = TriMesh { vertices, faces };
        let big = 50.0;
        let small = 500.0 * 0.005;
        let p = big / (big + small);
        let n = 20000;
        let k = count_split(&m, n, 6, |q| q[0] < 50.0);
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((k as f64 - n as f64 * p).abs() <= 3.0 * sd, "{k} vs {}", n as f64 * p);
    }

    #[test]
    fn pipeline_is_deterministic() {
        let m = parse_off(TETRA.as_bytes()).unwrap();
        let a = normalize(&sample_mesh(&m, 300, 9).unwrap());
        let b = normalize(&sample_mesh(&parse_off(TETRA.as_bytes()).unwrap(), 300, 9).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn directory_loader() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["b_tetra", "a_tetra"] {
            for split in ["train", "test"] {
                let d = dir.path().join(class).join(split);
                std::fs::create_dir_all(&d).unwrap();
                std::fs::write(d.join("m1.off"), TETRA).unwrap();
                std::fs::write(d.join("notes.txt"), "ignored").unwrap();
            }
        }
        let ds = load_off_dir(dir.path(), 64, 1).unwrap();
        assert_eq!(ds.classes, vec!["a_tetra", "b_tetra"]);
        assert_eq!((ds.train.len(), ds.test.len()), (2, 2));
        assert_eq!(ds.train.labels(), vec![0, 1]);
    }
}
