//! File formats: a small binary tensor container, pose and intrinsics JSON,
//! and online-state snapshots.
//!
//! Tensor container layout, all little endian: the magic bytes `GPMV`, the
//! rank as u32, one u32 per dimension, then the elements as f32 in row-major
//! order. Values are stored at single precision regardless of the in-memory
//! scalar type.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, Matrix2, Matrix3, Vector3};
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::online::OnlineState;
use crate::pose::Pose;
use crate::sweep::{ImageTensor, Intrinsics};

const MAGIC: [u8; 4] = *b"GPMV";
const MAX_RANK: usize = 4;

pub fn write_gpmv_to<W: Write>(mut out: W, dims: &[usize], data: &[f32]) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::Format(format!(
            "tensor rank must be 1..={MAX_RANK}, got {}",
            dims.len()
        )));
    }
    let expected: usize = dims.iter().product();
    if dims.contains(&0) || expected != data.len() {
        return Err(Error::Format(format!(
            "dims {dims:?} do not describe {} elements",
            data.len()
        )));
    }
    out.write_all(&MAGIC)?;
    out.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in data {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_gpmv_from<R: Read>(mut input: R) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::Format(format!("unsupported tensor rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        input.read_exact(&mut word)?;
        let d = u32::from_le_bytes(word) as usize;
        if d == 0 {
            return Err(Error::Format("zero-sized dimension".into()));
        }
        dims.push(d);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        input.read_exact(&mut word)?;
        let v = f32::from_le_bytes(word);
        if !v.is_finite() {
            return Err(Error::Format("non-finite tensor element".into()));
        }
        data.push(v);
    }
    if input.read(&mut word)? != 0 {
        return Err(Error::Format("trailing bytes after tensor payload".into()));
    }
    Ok((dims, data))
}

pub fn write_gpmv(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    write_gpmv_to(BufWriter::new(File::create(path)?), dims, data)
}

pub fn read_gpmv(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    read_gpmv_from(BufReader::new(File::open(path)?))
}

fn expect_rank(path: &Path, dims: &[usize], rank: usize) -> Result<()> {
    if dims.len() != rank {
        return Err(Error::Format(format!(
            "{}: expected rank {rank}, got {:?}",
            path.display(),
            dims
        )));
    }
    Ok(())
}

pub fn write_array3(path: &Path, array: &Array3<f64>) -> Result<()> {
    let (a, b, c) = array.dim();
    let data: Vec<f32> = array.iter().map(|&v| v as f32).collect();
    write_gpmv(path, &[a, b, c], &data)
}

pub fn read_array3(path: &Path) -> Result<Array3<f64>> {
    let (dims, data) = read_gpmv(path)?;
    expect_rank(path, &dims, 3)?;
    let values: Vec<f64> = data.into_iter().map(f64::from).collect();
    Array3::from_shape_vec((dims[0], dims[1], dims[2]), values)
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn write_array2(path: &Path, array: &Array2<f64>) -> Result<()> {
    let (a, b) = array.dim();
    let data: Vec<f32> = array.iter().map(|&v| v as f32).collect();
    write_gpmv(path, &[a, b], &data)
}

pub fn read_array2(path: &Path) -> Result<Array2<f64>> {
    let (dims, data) = read_gpmv(path)?;
    expect_rank(path, &dims, 2)?;
    let values: Vec<f64> = data.into_iter().map(f64::from).collect();
    Array2::from_shape_vec((dims[0], dims[1]), values).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_array1(path: &Path, array: &Array1<f64>) -> Result<()> {
    let data: Vec<f32> = array.iter().map(|&v| v as f32).collect();
    write_gpmv(path, &[array.len()], &data)
}

pub fn read_array1(path: &Path) -> Result<Array1<f64>> {
    let (dims, data) = read_gpmv(path)?;
    expect_rank(path, &dims, 1)?;
    Ok(Array1::from_vec(data.into_iter().map(f64::from).collect()))
}

pub fn read_image(path: &Path) -> Result<ImageTensor<f64>> {
    ImageTensor::new(read_array3(path)?)
}

pub fn write_image(path: &Path, image: &ImageTensor<f64>) -> Result<()> {
    write_array3(path, image.data())
}

/// Boolean mask stored as a rank-2 tensor; entries above 0.5 are valid.
pub fn read_mask(path: &Path) -> Result<Array2<bool>> {
    Ok(read_array2(path)?.mapv(|v| v > 0.5))
}

#[derive(Serialize, Deserialize)]
struct PoseRecord {
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
}

/// One JSON object per line: `{"R": [9 row-major entries], "t": [3]}`.
pub fn read_poses(path: &Path) -> Result<Vec<Pose<f64>>> {
    let reader = BufReader::new(File::open(path)?);
    let mut poses = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PoseRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), idx + 1)))?;
        let r = Matrix3::from_row_slice(&record.r);
        let t = Vector3::new(record.t[0], record.t[1], record.t[2]);
        let pose = Pose::new(r, t)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), idx + 1)))?;
        poses.push(pose);
    }
    if poses.is_empty() {
        return Err(Error::Format(format!("{}: no poses", path.display())));
    }
    Ok(poses)
}

pub fn write_poses(path: &Path, poses: &[Pose<f64>]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for pose in poses {
        let m = pose.rotation();
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[3 * i + j] = m[(i, j)];
            }
        }
        let t = pose.translation();
        let record = PoseRecord {
            r,
            t: [t[0], t[1], t[2]],
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct IntrinsicsRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics<f64>> {
    let record: IntrinsicsRecord = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    Intrinsics::new(
        record.fx,
        record.fy,
        record.cx,
        record.cy,
        record.width,
        record.height,
    )
}

pub fn write_intrinsics(path: &Path, k: &Intrinsics<f64>) -> Result<()> {
    let record = IntrinsicsRecord {
        fx: k.fx(),
        fy: k.fy(),
        cx: k.cx(),
        cy: k.cy(),
        width: k.width(),
        height: k.height(),
    };
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, &record)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Snapshot layout, f64 little endian throughout: gamma_sq, ell, sigma_sq,
/// latent length M, frame count, the 2x2 covariance row-major, then the 2xM
/// mean row-major. The previous pose is deliberately not stored; resuming
/// treats the next observation as a fresh update.
pub fn save_state(path: &Path, state: &OnlineState<f64>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let spec = state.spec();
    let m = state.latent_len();
    let mut header = [
        spec.gamma_sq(),
        spec.ell(),
        spec.sigma_sq(),
        m as f64,
        state.frame_count() as f64,
    ]
    .to_vec();
    let sigma = state.sigma();
    header.extend([sigma[(0, 0)], sigma[(0, 1)], sigma[(1, 0)], sigma[(1, 1)]]);
    for i in 0..2 {
        for j in 0..m {
            header.push(state.mu()[(i, j)]);
        }
    }
    for v in header {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_state(path: &Path) -> Result<OnlineState<f64>> {
    let mut input = BufReader::new(File::open(path)?);
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    if buf.len() % 8 != 0 || buf.len() < 8 * 11 {
        return Err(Error::Format(format!(
            "{}: snapshot must hold at least 11 f64 words, got {} bytes",
            path.display(),
            buf.len()
        )));
    }
    let words: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let m = words[3];
    if !m.is_finite() || m < 1.0 || m.fract() != 0.0 {
        return Err(Error::Format(format!("bad latent length {m}")));
    }
    let m = m as usize;
    if words.len() != 9 + 2 * m {
        return Err(Error::Format(format!(
            "{}: expected {} f64 words for M = {m}, got {}",
            path.display(),
            9 + 2 * m,
            words.len()
        )));
    }
    let frame_count = words[4];
    if !frame_count.is_finite() || frame_count < 0.0 || frame_count.fract() != 0.0 {
        return Err(Error::Format(format!("bad frame count {frame_count}")));
    }
    let spec = KernelSpec::new(KernelFamily::Matern32, words[0], words[1], words[2])?;
    let sigma = Matrix2::new(words[5], words[6], words[7], words[8]);
    let mu = DMatrix::from_fn(2, m, |i, j| words[9 + i * m + j]);
    OnlineState::from_parts(spec, mu, sigma, frame_count as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tensor_bytes_are_pinned() {
        let mut buf = Vec::new();
        write_gpmv_to(&mut buf, &[2, 2], &[1.0, 2.0, 3.0, 4.5]).unwrap();
        let expected = [
            b'G', b'P', b'M', b'V', // magic
            2, 0, 0, 0, // rank
            2, 0, 0, 0, 2, 0, 0, 0, // dims
            0, 0, 0x80, 0x3f, // 1.0
            0, 0, 0, 0x40, // 2.0
            0, 0, 0x40, 0x40, // 3.0
            0, 0, 0x90, 0x40, // 4.5
        ];
        assert_eq!(buf, expected);
    }

    #[test]
    fn tensor_round_trip_preserves_f32_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(311);
        let dims = [3usize, 4, 5];
        let data: Vec<f32> = (0..60).map(|_| rng.random_range(-5.0..5.0f32)).collect();
        let mut buf = Vec::new();
        write_gpmv_to(&mut buf, &dims, &data).unwrap();
        let (rdims, rdata) = read_gpmv_from(buf.as_slice()).unwrap();
        assert_eq!(rdims, dims);
        assert_eq!(rdata, data);
    }

    #[test]
    fn malformed_tensors_are_rejected() {
        assert!(read_gpmv_from(b"GPMX\x01\x00\x00\x00".as_slice()).is_err());

        let mut buf = Vec::new();
        write_gpmv_to(&mut buf, &[2], &[1.0, 2.0]).unwrap();
        let truncated = &buf[..buf.len() - 2];
        assert!(read_gpmv_from(truncated).is_err());

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(read_gpmv_from(trailing.as_slice()).is_err());

        let mut nan = Vec::new();
        write_gpmv_to(&mut nan, &[1], &[f32::NAN]).unwrap();
        assert!(read_gpmv_from(nan.as_slice()).is_err());

        assert!(write_gpmv_to(Vec::new(), &[2, 3], &[0.0; 5]).is_err());
        assert!(write_gpmv_to(Vec::new(), &[], &[]).is_err());
        assert!(write_gpmv_to(Vec::new(), &[0], &[]).is_err());
    }

    #[test]
    fn typed_arrays_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(313);

        let a3 = Array3::from_shape_fn((2, 3, 4), |_| rng.random_range(0.0..1.0f32) as f64);
        let p3 = dir.path().join("a3.gpmv");
        write_array3(&p3, &a3).unwrap();
        assert_eq!(read_array3(&p3).unwrap(), a3);

        let a2 = Array2::from_shape_fn((3, 5), |_| rng.random_range(0.0..1.0f32) as f64);
        let p2 = dir.path().join("a2.gpmv");
        write_array2(&p2, &a2).unwrap();
        assert_eq!(read_array2(&p2).unwrap(), a2);

        let a1 = Array1::from_vec(vec![0.5, 1.0, 2.0]);
        let p1 = dir.path().join("a1.gpmv");
        write_array1(&p1, &a1).unwrap();
        assert_eq!(read_array1(&p1).unwrap(), a1);

        assert!(read_array2(&p3).is_err());
    }

    #[test]
    fn pose_lines_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.jsonl");
        let mut rng = ChaCha8Rng::seed_from_u64(317);
        let poses: Vec<Pose<f64>> = (0..5)
            .map(|_| {
                let axis = nalgebra::Unit::new_normalize(Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(1.0..2.0f64),
                ));
                let r = nalgebra::Rotation3::from_axis_angle(&axis, rng.random_range(-1.0..1.0))
                    .into_inner();
                let t = Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                );
                Pose::new(r, t).unwrap()
            })
            .collect();
        write_poses(&path, &poses).unwrap();
        let loaded = read_poses(&path).unwrap();
        assert_eq!(loaded.len(), poses.len());
        for (a, b) in loaded.iter().zip(poses.iter()) {
            assert_relative_eq!(a.rotation(), b.rotation(), epsilon = 1e-15);
            assert_relative_eq!(a.translation(), b.translation(), epsilon = 1e-15);
        }

        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.ends_with('\n'));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn bad_pose_lines_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"R\": [1,0,0,0,1,0,0,0,1], \"t\": [0,0,0]}\n",
                "{\"R\": [2,0,0,0,1,0,0,0,1], \"t\": [0,0,0]}\n",
            ),
        )
        .unwrap();
        let err = read_poses(&path).unwrap_err().to_string();
        assert!(err.contains(":2:"), "error was: {err}");

        std::fs::write(&path, "{\"R\": [1,0,0], \"t\": [0,0,0]}\n").unwrap();
        assert!(read_poses(&path).is_err());

        std::fs::write(&path, "").unwrap();
        assert!(read_poses(&path).is_err());
    }

    #[test]
    fn intrinsics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("intrinsics.json");
        let k = Intrinsics::new(321.5, 320.25, 160.0, 120.0, 320, 240).unwrap();
        write_intrinsics(&path, &k).unwrap();
        assert_eq!(read_intrinsics(&path).unwrap(), k);
    }

    #[test]
    fn snapshot_layout_is_pinned() {
        let spec = KernelSpec::new(KernelFamily::Matern32, 2.0, 1.5, 0.25).unwrap();
        let mut state = OnlineState::new(spec, 3).unwrap();
        state.update(&DVector::from_vec(vec![1.0, -2.0, 0.5])).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.bin");
        save_state(&path, &state).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 8 * (9 + 2 * 3));
        let word = |i: usize| f64::from_le_bytes(bytes[8 * i..8 * (i + 1)].try_into().unwrap());
        assert_eq!(word(0), 2.0); // gamma_sq
        assert_eq!(word(1), 1.5); // ell
        assert_eq!(word(2), 0.25); // sigma_sq
        assert_eq!(word(3), 3.0); // latent length
        assert_eq!(word(4), 0.0); // frame count (update alone does not count)
        assert_eq!(word(5), state.sigma()[(0, 0)]);
        assert_eq!(word(9), state.mu()[(0, 0)]);
        assert_eq!(word(12), state.mu()[(1, 0)]);
    }

    #[test]
    fn snapshot_round_trip_restores_the_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(331);
        let spec = KernelSpec::new(KernelFamily::Matern32, 13.82, 1.098, 1.443).unwrap();
        let mut state = OnlineState::new(spec, 4).unwrap();
        for i in 0..6 {
            let pose = Pose::new(
                Matrix3::identity(),
                Vector3::new(0.3 * i as f64, 0.0, 0.0),
            )
            .unwrap();
            let y = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            state.step(&pose, &y).unwrap();
        }

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.bin");
        save_state(&path, &state).unwrap();
        let loaded = load_state(&path).unwrap();

        assert_eq!(loaded.mu(), state.mu());
        assert_eq!(loaded.sigma(), state.sigma());
        assert_eq!(loaded.frame_count(), 6);
        assert_eq!(loaded.latent_len(), 4);
        assert_eq!(loaded.spec().gamma_sq(), 13.82);
        assert!(loaded.last_pose().is_none());
    }

    #[test]
    fn corrupt_snapshots_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.bin");

        std::fs::write(&path, [0u8; 16]).unwrap();
        assert!(load_state(&path).is_err());

        // Valid length but absurd latent count.
        let mut words = vec![1.0f64, 1.0, 0.1, 2.5, 0.0];
        words.extend([1.0, 0.0, 0.0, 1.0]);
        words.extend([0.0; 5]);
        let bytes: Vec<u8> = words.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&path, bytes).unwrap();
        assert!(load_state(&path).is_err());
    }
}
