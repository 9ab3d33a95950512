//! Sibling ASCII files per shape: `.xyz`, `.normals`, `.curv`, `.pidx`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::neighborhood::PointCloud;

/// Which optional siblings [`save_pcpnet`] writes (when the cloud has them).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SaveWhat {
    pub normals: bool,
    pub curvatures: bool,
    pub eval_indices: bool,
}

impl SaveWhat {
    pub const ALL: SaveWhat = SaveWhat {
        normals: true,
        curvatures: true,
        eval_indices: true,
    };
    pub const POSITIONS: SaveWhat = SaveWhat {
        normals: false,
        curvatures: false,
        eval_indices: false,
    };
}

pub fn sibling(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn read_rows<T: FromStr>(path: &Path, width: usize) -> Result<Vec<Vec<T>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != width {
            return Err(Error::Parse {
                file: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected {width} values, found {}", fields.len()),
            });
        }
        let row = fields
            .iter()
            .map(|t| {
                t.parse::<T>().map_err(|_| Error::Parse {
                    file: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("not a number: {t:?}"),
                })
            })
            .collect::<Result<Vec<T>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn check_rows(xyz: &Path, other: &Path, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Format(format!(
            "{} has {expected} rows but {} has {got}",
            xyz.display(),
            other.display()
        )));
    }
    Ok(())
}

/// Reads `<base>.xyz` and whichever siblings exist.
pub fn load_pcpnet(base: &Path) -> Result<PointCloud> {
    let xyz_path = sibling(base, "xyz");
    let xyz: Vec<Vec<f64>> = read_rows(&xyz_path, 3)?;
    let n = xyz.len();
    let mut cloud = PointCloud {
        positions: xyz.iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect(),
        ..PointCloud::default()
    };

    let normals_path = sibling(base, "normals");
    if normals_path.exists() {
        let rows: Vec<Vec<f64>> = read_rows(&normals_path, 3)?;
        check_rows(&xyz_path, &normals_path, n, rows.len())?;
        cloud.gt_normals = Some(rows.iter().map(|r| Vector3::new(r[0], r[1], r[2])).collect());
    }
    let curv_path = sibling(base, "curv");
    if curv_path.exists() {
        let rows: Vec<Vec<f64>> = read_rows(&curv_path, 2)?;
        check_rows(&xyz_path, &curv_path, n, rows.len())?;
        cloud.gt_curvatures = Some(rows.iter().map(|r| [r[0], r[1]]).collect());
    }
    let pidx_path = sibling(base, "pidx");
    if pidx_path.exists() {
        let rows: Vec<Vec<usize>> = read_rows(&pidx_path, 1)?;
        let idx: Vec<usize> = rows.into_iter().map(|r| r[0]).collect();
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Format(format!(
                "{} references point {bad} but {} has {n} rows",
                pidx_path.display(),
                xyz_path.display()
            )));
        }
        cloud.eval_indices = Some(idx);
    }
    cloud.validate()?;
    Ok(cloud)
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn vec_rows(rows: &[Vector3<f64>]) -> String {
    let mut s = String::with_capacity(rows.len() * 54);
    for r in rows {
        let _ = writeln!(s, "{:.10e} {:.10e} {:.10e}", r.x, r.y, r.z);
    }
    s
}

/// Writes `<base>.xyz` plus the requested siblings the cloud carries.
/// Curvatures go out as `k_max k_min`.
pub fn save_pcpnet(cloud: &PointCloud, base: &Path, what: SaveWhat) -> Result<Vec<PathBuf>> {
    cloud.validate()?;
    if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut written = Vec::new();
    let p = sibling(base, "xyz");
    write_file(&p, &vec_rows(&cloud.positions))?;
    written.push(p);
    if let (true, Some(n)) = (what.normals, &cloud.gt_normals) {
        let p = sibling(base, "normals");
        write_file(&p, &vec_rows(n))?;
        written.push(p);
    }
    if let (true, Some(c)) = (what.curvatures, &cloud.gt_curvatures) {
        let mut s = String::new();
        for k in c {
            let (hi, lo) = if k[0] >= k[1] { (k[0], k[1]) } else { (k[1], k[0]) };
            let _ = writeln!(s, "{hi:.10e} {lo:.10e}");
        }
        let p = sibling(base, "curv");
        write_file(&p, &s)?;
        written.push(p);
    }
    if let (true, Some(idx)) = (what.eval_indices, &cloud.eval_indices) {
        let mut s = String::new();
        for i in idx {
            let _ = writeln!(s, "{i}");
        }
        let p = sibling(base, "pidx");
        write_file(&p, &s)?;
        written.push(p);
    }
    Ok(written)
}

/// Basepaths listed one per line; blank lines and `#` comments are skipped.
/// Relative entries resolve against `root` if given, else the manifest's directory.
pub fn read_manifest(path: &Path, root: Option<&Path>) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = root
        .map(Path::to_path_buf)
        .unwrap_or_else(|| path.parent().map(Path::to_path_buf).unwrap_or_default());
    let entries: Vec<PathBuf> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = Path::new(l);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        })
        .collect();
    if entries.is_empty() {
        return Err(Error::Format(format!("{} lists no shapes", path.display())));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn write(dir: &Path, name: &str, body: &str) {
        std::fs::write(dir.join(name), body).unwrap();
    }

    #[test]
    fn loads_siblings() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "s.xyz", "0 0 0\n1 0 0\n0 1 0\n");
        write(d.path(), "s.normals", "0 0 1\n0 0 1\n0 0 -1\n");
        let c = load_pcpnet(&d.path().join("s")).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.gt_normals.unwrap()[2], Vector3::new(0.0, 0.0, -1.0));
        assert!(c.gt_curvatures.is_none());
    }

    #[test]
    fn row_mismatch_names_both_files() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "s.xyz", "0 0 0\n1 0 0\n0 1 0\n");
        write(d.path(), "s.normals", "0 0 1\n0 0 1\n");
        match load_pcpnet(&d.path().join("s")) {
            Err(Error::Format(msg)) => assert!(msg.contains("s.xyz") && msg.contains("s.normals"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_token_reports_line() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "s.xyz", "0 0 0\n1 zero 0\n");
        match load_pcpnet(&d.path().join("s")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip_and_optional_files() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 50;
        let rv = |rng: &mut ChaCha8Rng| Vector3::new(rng.random_range(-5.0..5.0), rng.random::<f64>(), -rng.random::<f64>() * 1e-7);
        let cloud = PointCloud {
            positions: (0..n).map(|_| rv(&mut rng)).collect(),
            gt_normals: Some((0..n).map(|_| rv(&mut rng).normalize()).collect()),
            gt_curvatures: Some((0..n).map(|_| {
                let a: f64 = rng.random_range(-3.0..3.0);
                let b: f64 = rng.random_range(-3.0..3.0);
                [a.max(b), a.min(b)]
            }).collect()),
            eval_indices: Some(vec![3, 1, 49]),
        };
        let d = tempfile::tempdir().unwrap();
        let base = d.path().join("sub/shape");
        let files = save_pcpnet(&cloud, &base, SaveWhat::ALL).unwrap();
        assert_eq!(files.len(), 4);
        let back = load_pcpnet(&base).unwrap();
        for (a, b) in cloud.positions.iter().zip(&back.positions) {
            assert!((a - b).norm() <= 1e-9 * a.norm().max(1e-300));
        }
        assert_eq!(back.eval_indices, cloud.eval_indices);
        let pidx = std::fs::read_to_string(sibling(&base, "pidx")).unwrap();
        assert_eq!(pidx, "3\n1\n49\n");

        let bare = d.path().join("bare");
        let files = save_pcpnet(&PointCloud::new(cloud.positions.clone()).unwrap(), &bare, SaveWhat::ALL).unwrap();
        assert_eq!(files.len(), 1);
        assert!(!sibling(&bare, "normals").exists());
    }

    #[test]
    fn manifest_resolution() {
        let d = tempfile::tempdir().unwrap();
        write(d.path(), "list.txt", "# shapes\nfoo\n\n/abs/bar\n");
        let got = read_manifest(&d.path().join("list.txt"), None).unwrap();
        assert_eq!(got, vec![d.path().join("foo"), PathBuf::from("/abs/bar")]);
        let got = read_manifest(&d.path().join("list.txt"), Some(Path::new("/data"))).unwrap();
        assert_eq!(got[0], PathBuf::from("/data/foo"));
    }
}
