//! CT volume pretreatment: isotropic resampling, Hounsfield windowing,
//! lesion-centered cropping, axis-aligned augmentation and block pooling.
//!
//! Voxels are stored x-fastest: index = x + nx * (y + ny * z).

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Side length of the lesion crop.
pub const CROP_SIZE: usize = 48;
/// Normalized value used for padding (air).
pub const PAD_VALUE: f32 = -1.0;
/// Default Hounsfield window mapped onto [-1, 1].
pub const HU_WINDOW: (f64, f64) = (-1024.0, 400.0);
/// Maximum translation (voxels per axis) drawn by [`AugmentParams::draw`].
pub const MAX_SHIFT: i64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    /// Millimeters per voxel along x, y, z.
    pub spacing: [f64; 3],
    pub voxels: Vec<f32>,
    pub normalized: bool,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<f32>, normalized: bool) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Volume(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Volume(format!("spacing must be positive, got {spacing:?}")));
        }
        if voxels.len() != dims.iter().product::<usize>() {
            return Err(Error::Volume(format!(
                "{} voxels for dims {dims:?}",
                voxels.len()
            )));
        }
        Ok(Self {
            dims,
            spacing,
            voxels,
            normalized,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f32, normalized: bool) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims.iter().product()], normalized)
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.idx(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.idx(x, y, z);
        self.voxels[i] = v;
    }

    fn is_cube(&self) -> bool {
        self.dims[0] == self.dims[1] && self.dims[1] == self.dims[2]
    }

    /// Header line `dims=nx,ny,nz spacing=sx,sy,sz normalized=0|1`, then
    /// little-endian f32 voxels.
    pub fn to_bytes(&self) -> Vec<u8> {
        let [nx, ny, nz] = self.dims;
        let [sx, sy, sz] = self.spacing;
        let mut out = format!(
            "dims={nx},{ny},{nz} spacing={sx},{sy},{sz} normalized={}\n",
            u8::from(self.normalized)
        )
        .into_bytes();
        out.reserve(self.voxels.len() * 4);
        for v in &self.voxels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Volume("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::Volume("header is not UTF-8".into()))?;
        let mut dims = None;
        let mut spacing = None;
        let mut normalized = None;
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Volume(format!("bad header field `{field}`")))?;
            match key {
                "dims" => dims = Some(parse_triple::<usize>(value)?),
                "spacing" => spacing = Some(parse_triple::<f64>(value)?),
                "normalized" => {
                    normalized = Some(match value {
                        "0" => false,
                        "1" => true,
                        _ => return Err(Error::Volume(format!("bad normalized flag `{value}`"))),
                    })
                }
                _ => return Err(Error::Volume(format!("unknown header key `{key}`"))),
            }
        }
        let (Some(dims), Some(spacing), Some(normalized)) = (dims, spacing, normalized) else {
            return Err(Error::Volume("header needs dims, spacing and normalized".into()));
        };
        let body = &bytes[nl + 1..];
        let expected = dims.iter().product::<usize>() * 4;
        if body.len() != expected {
            return Err(Error::Volume(format!(
                "voxel payload is {} bytes, expected {expected}",
                body.len()
            )));
        }
        let voxels = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(dims, spacing, voxels, normalized)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Volume(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Volume(format!("expected three comma-separated values, got `{s}`")));
    }
    let p = |i: usize| {
        parts[i]
            .parse::<T>()
            .map_err(|_| Error::Volume(format!("bad value `{}`", parts[i])))
    };
    Ok([p(0)?, p(1)?, p(2)?])
}

/// Lesion mass center in millimeters, origin at the center of voxel (0, 0, 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Centroid {
    pub position: [f64; 3],
}

impl Centroid {
    /// Position in the frame of a volume resampled from `source` spacing to
    /// `target` spacing with [`resample_trilinear`]. The resampled grid shares
    /// the source's outer voxel boundary, so voxel centers shift by half the
    /// spacing difference.
    pub fn in_resampled_frame(&self, source: [f64; 3], target: [f64; 3]) -> Centroid {
        let mut position = self.position;
        for a in 0..3 {
            position[a] += 0.5 * (source[a] - target[a]);
        }
        Centroid { position }
    }
}

/// Resample to `target` spacing by trilinear interpolation.
///
/// Source and output grids share their outer boundary: output voxel `i` has
/// its center at `(i + 0.5) * target` mm from the volume edge, which maps to
/// the fractional source index `(i + 0.5) * target / spacing - 0.5`. Sampling
/// positions outside the source clamp to the border voxels.
pub fn resample_trilinear(v: &Volume, target: [f64; 3]) -> Result<Volume> {
    if target.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(Error::Volume(format!("target spacing must be positive, got {target:?}")));
    }
    let mut dims = [0usize; 3];
    for a in 0..3 {
        dims[a] = ((v.dims[a] as f64 * v.spacing[a] / target[a]).round() as usize).max(1);
    }

    // Per-axis (lower index, upper index, upper weight) lookups.
    let axis_taps = |a: usize| -> Vec<(usize, usize, f64)> {
        let n = v.dims[a];
        (0..dims[a])
            .map(|i| {
                let pos = ((i as f64 + 0.5) * target[a] / v.spacing[a] - 0.5).clamp(0.0, (n - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let (tx, ty, tz) = (axis_taps(0), axis_taps(1), axis_taps(2));

    let mut voxels = Vec::with_capacity(dims.iter().product());
    for &(z0, z1, wz) in &tz {
        for &(y0, y1, wy) in &ty {
            for &(x0, x1, wx) in &tx {
                let s = |x, y, z| v.get(x, y, z) as f64;
                let c00 = s(x0, y0, z0) * (1.0 - wx) + s(x1, y0, z0) * wx;
                let c10 = s(x0, y1, z0) * (1.0 - wx) + s(x1, y1, z0) * wx;
                let c01 = s(x0, y0, z1) * (1.0 - wx) + s(x1, y0, z1) * wx;
                let c11 = s(x0, y1, z1) * (1.0 - wx) + s(x1, y1, z1) * wx;
                let c0 = c00 * (1.0 - wy) + c10 * wy;
                let c1 = c01 * (1.0 - wy) + c11 * wy;
                voxels.push((c0 * (1.0 - wz) + c1 * wz) as f32);
            }
        }
    }
    Volume::new(dims, target, voxels, v.normalized)
}

/// Map Hounsfield units in `window` linearly onto [-1, 1], clamping outside.
pub fn normalize_hu(v: &Volume, window: (f64, f64)) -> Result<Volume> {
    let (lo, hi) = window;
    if hi.is_nan() || lo.is_nan() || hi <= lo {
        return Err(Error::Volume(format!("HU window needs hi > lo, got ({lo}, {hi})")));
    }
    if v.normalized {
        return Err(Error::Volume("volume is already normalized".into()));
    }
    let voxels = v
        .voxels
        .iter()
        .map(|&h| ((2.0 * (h as f64 - lo) / (hi - lo)) - 1.0).clamp(-1.0, 1.0) as f32)
        .collect();
    Volume::new(v.dims, v.spacing, voxels, true)
}

/// Cube of side `size` around the voxel nearest `c`; the center voxel sits at
/// crop index `(size - 1) / 2` on every axis. Outside voxels read as
/// [`PAD_VALUE`].
pub fn crop_centered(v: &Volume, c: &Centroid, size: usize) -> Result<Volume> {
    if c.position.iter().any(|p| !p.is_finite()) {
        return Err(Error::Volume(format!("non-finite centroid {:?}", c.position)));
    }
    if size == 0 {
        return Err(Error::Volume("crop size must be positive".into()));
    }
    let start: [i64; 3] = std::array::from_fn(|a| {
        let center = (c.position[a] / v.spacing[a]).round() as i64;
        center - ((size - 1) / 2) as i64
    });
    let mut out = Volume::filled([size; 3], v.spacing, PAD_VALUE, v.normalized)?;
    for z in 0..size {
        let sz = start[2] + z as i64;
        if sz < 0 || sz >= v.dims[2] as i64 {
            continue;
        }
        for y in 0..size {
            let sy = start[1] + y as i64;
            if sy < 0 || sy >= v.dims[1] as i64 {
                continue;
            }
            for x in 0..size {
                let sx = start[0] + x as i64;
                if sx < 0 || sx >= v.dims[0] as i64 {
                    continue;
                }
                out.set(x, y, z, v.get(sx as usize, sy as usize, sz as usize));
            }
        }
    }
    Ok(out)
}

/// One draw of the axis-aligned augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct AugmentParams {
    /// Rotation axis (0 = x, 1 = y, 2 = z).
    pub axis: usize,
    /// Number of 90 degree turns, 0..=3.
    pub quarter_turns: u8,
    pub flips: [bool; 3],
    pub shift: [i64; 3],
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn draw(rng: &mut SplitMix64) -> Self {
        let axis = rng.below(3) as usize;
        let quarter_turns = rng.below(4) as u8;
        let flips = [rng.bernoulli_half(), rng.bernoulli_half(), rng.bernoulli_half()];
        let shift = [
            rng.range_inclusive(-MAX_SHIFT, MAX_SHIFT),
            rng.range_inclusive(-MAX_SHIFT, MAX_SHIFT),
            rng.range_inclusive(-MAX_SHIFT, MAX_SHIFT),
        ];
        Self {
            axis,
            quarter_turns,
            flips,
            shift,
        }
    }
}

/// Rotate, then flip, then translate a cubic volume.
pub fn apply_augment(v: &Volume, p: &AugmentParams) -> Result<Volume> {
    if !v.is_cube() {
        return Err(Error::Volume(format!("augmentation needs a cube, got {:?}", v.dims)));
    }
    let n = v.dims[0] as i64;
    let mut out = Volume::filled(v.dims, v.spacing, PAD_VALUE, v.normalized)?;
    // The two axes spanning the rotation plane.
    let (a, b) = match p.axis {
        0 => (1, 2),
        1 => (2, 0),
        _ => (0, 1),
    };
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                // Walk the forward transform backwards from the output voxel.
                let mut q = [x - p.shift[0], y - p.shift[1], z - p.shift[2]];
                if q.iter().any(|&c| c < 0 || c >= n) {
                    continue;
                }
                for (axis, &flip) in p.flips.iter().enumerate() {
                    if flip {
                        q[axis] = n - 1 - q[axis];
                    }
                }
                // Inverse of one quarter turn (u, w) -> (n-1-w, u) is (u, w) -> (w, n-1-u).
                for _ in 0..p.quarter_turns % 4 {
                    let (u, w) = (q[a], q[b]);
                    q[a] = w;
                    q[b] = n - 1 - u;
                }
                out.set(
                    x as usize,
                    y as usize,
                    z as usize,
                    v.get(q[0] as usize, q[1] as usize, q[2] as usize),
                );
            }
        }
    }
    Ok(out)
}

/// Random rotation, flips and translation, deterministic in `seed`.
pub fn augment(v: &Volume, seed: u64) -> Result<Volume> {
    let mut rng = SplitMix64::substream(seed, "augment");
    apply_augment(v, &AugmentParams::draw(&mut rng))
}

/// Mean over non-overlapping `block`-sided cubes, x-fastest output order.
pub fn featurize_pool(v: &Volume, block: usize) -> Result<Vec<f64>> {
    if block == 0 || v.dims.iter().any(|&d| d % block != 0) {
        return Err(Error::Volume(format!(
            "block {block} does not divide dims {:?}",
            v.dims
        )));
    }
    let [bx, by, bz] = [v.dims[0] / block, v.dims[1] / block, v.dims[2] / block];
    let mut sums = vec![0.0f64; bx * by * bz];
    for z in 0..v.dims[2] {
        for y in 0..v.dims[1] {
            for x in 0..v.dims[0] {
                let cell = x / block + bx * (y / block + by * (z / block));
                sums[cell] += v.get(x, y, z) as f64;
            }
        }
    }
    let denom = (block * block * block) as f64;
    Ok(sums.into_iter().map(|s| s / denom).collect())
}

/// The full pretreatment chain for one raw scan: resample to 1 mm,
/// normalize, crop around the centroid and pool into a feature vector.
pub fn preprocess(raw: &Volume, centroid: &Centroid, window: (f64, f64), block: usize) -> Result<Vec<f64>> {
    let target = [1.0; 3];
    let iso = resample_trilinear(raw, target)?;
    let norm = if iso.normalized { iso } else { normalize_hu(&iso, window)? };
    let c = centroid.in_resampled_frame(raw.spacing, target);
    let crop = crop_centered(&norm, &c, CROP_SIZE)?;
    featurize_pool(&crop, block)
}
