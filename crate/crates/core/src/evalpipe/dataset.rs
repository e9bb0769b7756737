use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Rect;

/// KITTI object types kept as vehicles.
pub const KITTI_VEHICLE_TYPES: [&str; 3] = ["Car", "Van", "Truck"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "image")]
    pub image_id: String,
    pub boxes: Vec<Rect>,
}

impl Annotation {
    /// Clips every box to the image, dropping boxes that fall outside.
    pub fn clamped(&self, width: usize, height: usize) -> Annotation {
        Annotation {
            image_id: self.image_id.clone(),
            boxes: self.boxes.iter().filter_map(|b| b.clip(width, height)).collect(),
        }
    }
}

/// Parses one KITTI label file. Columns 5-8 are left, top, right, bottom.
pub fn parse_kitti(text: &str, file: &Path) -> Result<Vec<Rect>> {
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            file: file.to_path_buf(),
            line: i + 1,
            reason,
        };
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < 8 {
            return Err(err(format!("expected at least 8 columns, found {}", cols.len())));
        }
        let mut v = [0.0f64; 4];
        for (k, s) in cols[4..8].iter().enumerate() {
            v[k] = s
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(format!("bad bbox value {s:?}")))?;
        }
        if !KITTI_VEHICLE_TYPES.contains(&cols[0]) {
            continue;
        }
        let (l, t, r, b) = (v[0].round(), v[1].round(), v[2].round(), v[3].round());
        let rect = Rect::try_new(l as i32, t as i32, (r - l) as i32, (b - t) as i32)
            .ok_or_else(|| err(format!("degenerate bbox {l} {t} {r} {b}")))?;
        boxes.push(rect);
    }
    Ok(boxes)
}

/// Reads every `*.txt` label file in `dir` (sorted by name); the image id
/// is the file stem.
pub fn load_kitti_labels(dir: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            Ok(Annotation {
                image_id: p.file_stem().unwrap().to_string_lossy().into_owned(),
                boxes: parse_kitti(&text, &p)?,
            })
        })
        .collect()
}

pub fn annotations_to_jsonl(anns: &[Annotation]) -> Result<String> {
    let mut s = String::new();
    for a in anns {
        s.push_str(&serde_json::to_string(a)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn annotations_from_jsonl(text: &str, file: &Path) -> Result<Vec<Annotation>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                file: file.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    annotations_from_jsonl(&text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kitti_line() {
        let text = "Car 0.0 0 0.0 100 120 180 200 1.5 1.6 3.9 1.0 1.0 10.0 0.1\n\
                    DontCare -1 -1 -10 5.0 6.0 20.0 30.0 -1 -1 -1 -1000 -1000 -1000 -10\n\
                    Pedestrian 0 0 0 1 2 3 4 1 1 1 1 1 1 0\n\
                    Van 0.0 0 0.0 10.4 20.6 40.5 60.2 1 1 1 1 1 1 0\n";
        let b = parse_kitti(text, Path::new("000001.txt")).unwrap();
        assert_eq!(b, vec![Rect::new(100, 120, 80, 80), Rect::new(10, 21, 31, 39)]);
        assert!(parse_kitti("", Path::new("e.txt")).unwrap().is_empty());
    }

    #[test]
    fn kitti_malformed_names_file_and_line() {
        let e = parse_kitti("Car 0 0 0 1 2 3\n", Path::new("a.txt")).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
        let e = parse_kitti("\nTruck 0 0 0 1 x 3 4\n", Path::new("a.txt")).unwrap_err();
        assert!(e.to_string().contains("a.txt") && e.to_string().contains('2'), "{e}");
    }

    #[test]
    fn kitti_dir() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("000002.txt"), "Truck 0 0 0 0 0 10 10\n").unwrap();
        fs::write(dir.path().join("000001.txt"), "").unwrap();
        fs::write(dir.path().join("notes.md"), "x").unwrap();
        let a = load_kitti_labels(dir.path()).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a[0].image_id, "000001");
        assert!(a[0].boxes.is_empty());
        assert_eq!(a[1].boxes, vec![Rect::new(0, 0, 10, 10)]);
    }

    #[test]
    fn jsonl_round_trip() {
        let a = vec![
            Annotation { image_id: "a.pgm".into(), boxes: vec![Rect::new(1, 2, 3, 4)] },
            Annotation { image_id: "b.pgm".into(), boxes: vec![] },
        ];
        let text = annotations_to_jsonl(&a).unwrap();
        assert!(text.starts_with("{\"image\":\"a.pgm\",\"boxes\":[[1,2,3,4]]}"));
        assert_eq!(annotations_from_jsonl(&text, Path::new("x")).unwrap(), a);
    }
}
