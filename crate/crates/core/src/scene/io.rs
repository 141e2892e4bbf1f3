use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{CanonicalGaussian, SH_COEFFS};
use crate::error::{Error, Result};

pub const SCENE_FORMAT: &str = "HAIF-SCENE-1";
const RECORD_LAYOUT: &str = "f32le mu[3] rot[4] log_scale[3] logit_opacity[1] sh[12]";
const RECORD_FLOATS: usize = 3 + 4 + 3 + 1 + SH_COEFFS;

/// Writes a scene: text header, then one little-endian `f32` record per
/// Gaussian.
pub fn write_scene(path: impl AsRef<Path>, gaussians: &[CanonicalGaussian]) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!(
        "{SCENE_FORMAT}\ncount {}\nrecord {RECORD_LAYOUT}\nend_header\n",
        gaussians.len()
    )
    .into_bytes();
    out.reserve(gaussians.len() * RECORD_FLOATS * 4);
    for g in gaussians {
        let fields = g
            .mu
            .iter()
            .chain(&g.rot)
            .chain(&g.log_scale)
            .chain(std::iter::once(&g.logit_opacity))
            .chain(&g.sh);
        for v in fields {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_scene(path: impl AsRef<Path>) -> Result<Vec<CanonicalGaussian>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(f);
    let mut line = String::new();
    let mut next_line = |reader: &mut BufReader<std::fs::File>| -> Result<String> {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::format(path, "truncated scene header"));
        }
        Ok(line.trim_end().to_owned())
    };
    let magic = next_line(&mut reader)?;
    if magic != SCENE_FORMAT {
        return Err(Error::Incompatible(format!(
            "{}: expected {SCENE_FORMAT}, found {magic:?}",
            path.display()
        )));
    }
    let mut count = None;
    loop {
        let l = next_line(&mut reader)?;
        if l == "end_header" {
            break;
        }
        match l.split_once(' ') {
            Some(("count", n)) => {
                count = Some(n.trim().parse::<usize>().map_err(|_| {
                    Error::format(path, format!("bad count {n:?}"))
                })?)
            }
            Some(("record", layout)) if layout.trim() == RECORD_LAYOUT => {}
            Some(("record", layout)) => {
                return Err(Error::format(path, format!("unsupported record layout {layout:?}")))
            }
            _ => return Err(Error::format(path, format!("unexpected header line {l:?}"))),
        }
    }
    let count = count.ok_or_else(|| Error::format(path, "missing count"))?;
    let mut bytes = vec![0u8; count * RECORD_FLOATS * 4];
    reader
        .read_exact(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let floats: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(floats
        .chunks_exact(RECORD_FLOATS)
        .map(|r| {
            let mut sh = [0.0; SH_COEFFS];
            sh.copy_from_slice(&r[11..]);
            CanonicalGaussian {
                mu: [r[0], r[1], r[2]],
                rot: [r[3], r[4], r[5], r[6]],
                log_scale: [r[7], r[8], r[9]],
                logit_opacity: r[10],
                sh,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_record_layout() {
        let g = CanonicalGaussian {
            mu: [1.0, 2.0, 3.0],
            rot: [1.0, 0.0, 0.0, 0.0],
            log_scale: [-1.0, -2.0, -3.0],
            logit_opacity: 0.5,
            sh: [0.25; SH_COEFFS],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.haif");
        write_scene(&p, &[g.clone(), g.clone()]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let header = "HAIF-SCENE-1\ncount 2\nrecord f32le mu[3] rot[4] log_scale[3] logit_opacity[1] sh[12]\nend_header\n";
        assert!(bytes.starts_with(header.as_bytes()));
        assert_eq!(bytes.len(), header.len() + 2 * 23 * 4);
        assert_eq!(&bytes[header.len()..header.len() + 4], &1.0f32.to_le_bytes());
        assert_eq!(read_scene(&p).unwrap(), vec![g.clone(), g]);
    }

    #[test]
    fn wrong_version_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.haif");
        std::fs::write(&p, "HAIF-SCENE-0\ncount 0\nend_header\n").unwrap();
        assert!(matches!(read_scene(&p), Err(Error::Incompatible(_))));
    }
}
