//! Normalized trajectories and the `DYFT` file format.
//!
//! ```text
//! magic      "DYFT"
//! version    u32
//! system id  u32 byte length + UTF-8 bytes
//! dt         f64                 physical time between snapshots
//! rank       u32
//! dims       rank x u64          (T, C, spatial...) or (M, J, C, spatial...)
//! channels   u32                 C
//! mean       C x f64
//! std        C x f64
//! payload    prod(dims) x f32    normalized values, row-major
//! ```
//! All integers and floats are little-endian.

use std::io::{Read, Write};

use crate::binio::{put_dims, put_f64, put_str, put_u32, Reader};
use crate::error::{invalid, Error, Result};
use crate::Tensor;

pub const TRAJECTORY_MAGIC: &[u8; 4] = b"DYFT";
pub const TRAJECTORY_VERSION: u32 = 1;

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Fits mean and standard deviation per channel over every snapshot of
    /// every `(T, C, spatial...)` tensor. A channel with zero spread gets
    /// standard deviation 1.
    pub fn fit(raws: &[&Tensor]) -> Result<Self> {
        let first = raws.first().ok_or_else(|| invalid("no trajectories to fit"))?;
        if first.shape().len() < 2 {
            return Err(invalid("trajectory tensors need a (T, C, ...) shape"));
        }
        let channels = first.shape()[1];
        let mut sum = vec![0.0; channels];
        let mut sq = vec![0.0; channels];
        let mut count = 0usize;
        for raw in raws {
            if raw.shape()[1..] != first.shape()[1..] {
                return Err(Error::Shape { op: "normalization", detail: format!("{:?} vs {:?}", raw.shape(), first.shape()) });
            }
            let per = raw.len() / (raw.shape()[0] * channels);
            for (i, chunk) in raw.data().chunks(per).enumerate() {
                let ch = i % channels;
                sum[ch] += chunk.iter().sum::<f64>();
            }
            count += raw.shape()[0] * per;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        for raw in raws {
            let per = raw.len() / (raw.shape()[0] * channels);
            for (i, chunk) in raw.data().chunks(per).enumerate() {
                let ch = i % channels;
                sq[ch] += chunk.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / count as f64).sqrt();
                if sd > 0.0 { sd } else { 1.0 }
            })
            .collect();
        Ok(Self { mean, std })
    }

    /// Applies `f(value, channel)` to a tensor whose channel axis is `axis`.
    fn apply(&self, t: &Tensor, axis: usize, f: impl Fn(f64, usize) -> f64) -> Result<Tensor> {
        let shape = t.shape();
        if shape.len() <= axis || shape[axis] != self.channels() {
            return Err(Error::Shape {
                op: "normalization",
                detail: format!("{shape:?} has no {}-channel axis at {axis}", self.channels()),
            });
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let data = t
            .data()
            .chunks(inner.max(1))
            .enumerate()
            .flat_map(|(i, chunk)| {
                let ch = i % self.channels();
                chunk.iter().map(move |&v| (v, ch)).collect::<Vec<_>>()
            })
            .map(|(v, ch)| f(v, ch))
            .collect();
        Tensor::new(shape.to_vec(), data)
    }

    pub fn normalize(&self, raw: &Tensor, channel_axis: usize) -> Result<Tensor> {
        self.apply(raw, channel_axis, |v, ch| (v - self.mean[ch]) / self.std[ch])
    }

    pub fn denormalize(&self, t: &Tensor, channel_axis: usize) -> Result<Tensor> {
        self.apply(t, channel_axis, |v, ch| v * self.std[ch] + self.mean[ch])
    }
}

/// A normalized sequence of snapshots, shape `(T, C, spatial...)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub system_id: String,
    snapshots: Tensor,
    pub dt: f64,
    pub normalization: Normalization,
}

impl Trajectory {
    pub fn new(system_id: impl Into<String>, snapshots: Tensor, dt: f64, normalization: Normalization) -> Result<Self> {
        let shape = snapshots.shape();
        if shape.len() < 2 {
            return Err(invalid(format!("trajectory needs (T, C, ...) shape, got {shape:?}")));
        }
        if shape[0] < 2 {
            return Err(invalid("trajectory needs at least 2 snapshots"));
        }
        if shape[1] != normalization.channels() {
            return Err(invalid(format!(
                "{} channels but normalization for {}",
                shape[1],
                normalization.channels()
            )));
        }
        if !(dt > 0.0) {
            return Err(invalid("snapshot spacing must be positive"));
        }
        Ok(Self { system_id: system_id.into(), snapshots, dt, normalization })
    }

    /// Normalizes raw snapshots with `stats`.
    pub fn from_raw(system_id: impl Into<String>, raw: &Tensor, dt: f64, stats: Normalization) -> Result<Self> {
        let snapshots = stats.normalize(raw, 1)?;
        Self::new(system_id, snapshots, dt, stats)
    }

    pub fn len(&self) -> usize {
        self.snapshots.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshots(&self) -> &Tensor {
        &self.snapshots
    }

    /// Shape of one snapshot, `(C, spatial...)`.
    pub fn snapshot_shape(&self) -> &[usize] {
        &self.snapshots.shape()[1..]
    }

    pub fn snapshot_len(&self) -> usize {
        self.snapshot_shape().iter().product()
    }

    /// Snapshot `t` as a borrowed slice.
    pub fn snapshot(&self, t: usize) -> &[f64] {
        self.snapshots.row(t)
    }

    pub fn snapshot_tensor(&self, t: usize) -> Tensor {
        Tensor::new(self.snapshot_shape().to_vec(), self.snapshot(t).to_vec()).expect("shape matches")
    }

    pub fn denormalized(&self) -> Result<Tensor> {
        self.normalization.denormalize(&self.snapshots, 1)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_dyft(w, &self.system_id, self.dt, &self.snapshots, &self.normalization)
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let (id, dt, tensor, norm) = read_dyft(r)?;
        Self::new(id, tensor, dt, norm)
    }
}

/// Writes any tensor with a channel axis matching `norm` as a `DYFT` file.
pub fn write_dyft(w: &mut impl Write, system_id: &str, dt: f64, tensor: &Tensor, norm: &Normalization) -> Result<()> {
    w.write_all(TRAJECTORY_MAGIC)?;
    put_u32(w, TRAJECTORY_VERSION)?;
    put_str(w, system_id)?;
    put_f64(w, dt)?;
    put_dims(w, tensor.shape())?;
    put_u32(w, norm.channels() as u32)?;
    for v in norm.mean.iter().chain(&norm.std) {
        put_f64(w, *v)?;
    }
    let mut payload = Vec::with_capacity(tensor.len() * 4);
    for v in tensor.data() {
        payload.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&payload)?;
    Ok(())
}

/// Reads a `DYFT` file: `(system id, dt, values, normalization)`.
pub fn read_dyft(r: impl Read) -> Result<(String, f64, Tensor, Normalization)> {
    let mut r = Reader::new(r, "DYFT");
    r.magic(TRAJECTORY_MAGIC)?;
    let version = r.u32()?;
    if version != TRAJECTORY_VERSION {
        return Err(r.malformed(format!("unsupported version {version}")));
    }
    let id = r.string()?;
    let dt = r.f64()?;
    let dims = r.dims()?;
    let channels = r.u32()? as usize;
    if !dims.contains(&channels) {
        return Err(r.malformed(format!("no axis of size {channels} in {dims:?}")));
    }
    let mean = (0..channels).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let std = (0..channels).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    let len: usize = dims.iter().product();
    let data = (0..len).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
    r.expect_eof()?;
    Ok((id, dt, Tensor::new(dims, data)?, Normalization { mean, std }))
}

/// One training window: initial condition at `t`, targets at `t+1..=t+h`.
/// Borrows snapshots from the trajectory.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    pub t: usize,
    pub h: usize,
    traj: &'a Trajectory,
}

impl<'a> Window<'a> {
    pub fn initial(&self) -> &'a [f64] {
        self.traj.snapshot(self.t)
    }

    /// `x_{t+i}` for `1 <= i <= h`.
    pub fn target(&self, i: usize) -> &'a [f64] {
        assert!((1..=self.h).contains(&i), "offset {i} outside 1..={}", self.h);
        self.traj.snapshot(self.t + i)
    }

    pub fn end(&self) -> &'a [f64] {
        self.traj.snapshot(self.t + self.h)
    }

    pub fn trajectory(&self) -> &'a Trajectory {
        self.traj
    }
}

/// Every window `(x_t, {x_{t+i}}, x_{t+h})` with `t` in `0..=T-h-1`.
pub fn split_windows(traj: &Trajectory, h: usize) -> Result<impl Iterator<Item = Window<'_>>> {
    if h == 0 {
        return Err(invalid("horizon must be at least 1"));
    }
    if traj.len() < h + 1 {
        return Err(invalid(format!("trajectory of length {} is shorter than horizon {h} + 1", traj.len())));
    }
    Ok((0..traj.len() - h).map(move |t| Window { t, h, traj }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(t: usize, c: usize, n: usize) -> Trajectory {
        let data = (0..t * c * n).map(|v| v as f64 * 0.5 - 3.0).collect();
        let raw = Tensor::new(vec![t, c, n], data).unwrap();
        let stats = Normalization::fit(&[&raw]).unwrap();
        Trajectory::from_raw("ramp", &raw, 0.1, stats).unwrap()
    }

    #[test]
    fn window_counts() {
        assert_eq!(split_windows(&ramp(9, 1, 2), 8).unwrap().count(), 1);
        let traj = ramp(12, 1, 2);
        let windows: Vec<_> = split_windows(&traj, 4).unwrap().collect();
        assert_eq!(windows.len(), 8);
        for w in &windows {
            for i in 1..=4 {
                assert_eq!(w.target(i), traj.snapshot(w.t + i));
            }
        }
        assert!(split_windows(&ramp(4, 1, 2), 4).is_err());
    }

    #[test]
    fn unit_horizon_gives_next_step_pairs() {
        let traj = ramp(5, 2, 3);
        for w in split_windows(&traj, 1).unwrap() {
            assert_eq!(w.initial(), traj.snapshot(w.t));
            assert_eq!(w.end(), traj.snapshot(w.t + 1));
        }
    }

    #[test]
    fn windows_borrow_rather_than_copy() {
        let traj = ramp(6, 1, 4);
        let w = split_windows(&traj, 2).unwrap().next().unwrap();
        assert!(std::ptr::eq(w.initial().as_ptr(), traj.snapshots().data().as_ptr()));
    }

    #[test]
    fn fitted_stats_standardize_each_channel() {
        let traj = ramp(10, 3, 4);
        let per = 4;
        for ch in 0..3 {
            let vals: Vec<f64> = (0..10).flat_map(|t| traj.snapshot(t)[ch * per..(ch + 1) * per].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dyft_round_trip_keeps_stats_exact() {
        let traj = ramp(7, 2, 3);
        let mut buf = Vec::new();
        traj.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"DYFT");
        let back = Trajectory::read_from(&buf[..]).unwrap();
        assert_eq!(back.normalization, traj.normalization);
        assert_eq!(back.dt, traj.dt);
        assert_eq!(back.system_id, "ramp");
        assert!(back.snapshots().max_abs_diff(traj.snapshots()) < 1e-6);
        buf.push(0);
        assert!(Trajectory::read_from(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn normalize_then_denormalize_is_identity(
            vals in prop::collection::vec(-1e3f64..1e3, 24),
        ) {
            let raw = Tensor::new(vec![4, 2, 3], vals).unwrap();
            let stats = Normalization::fit(&[&raw]).unwrap();
            let back = stats.denormalize(&stats.normalize(&raw, 1).unwrap(), 1).unwrap();
            prop_assert!(back.max_abs_diff(&raw) < 1e-12 * 1e3);
        }

        #[test]
        fn windows_stay_in_bounds(t in 2usize..40, h in 1usize..40) {
            prop_assume!(t >= h + 1);
            let traj = ramp(t, 1, 1);
            for w in split_windows(&traj, h).unwrap() {
                prop_assert!(w.t + w.h <= t - 1);
            }
        }
    }
}
