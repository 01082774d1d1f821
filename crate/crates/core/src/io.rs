//! File formats: waveform and master-curve CSVs, density volumes, particle
//! snapshots, gradient dumps, and atomic writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::constitutive::ActuationWaveform;
use crate::error::{Error, Result};
use crate::math::Vector;
use crate::prony::{CurveSample, MasterCurve};
use crate::scenario::Problem;
use crate::sim::{ParticleSet, Phase};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "SOROMORPH_OUT";

pub const VOLUME_MAGIC: &[u8; 16] = b"SOROMORPH-VOL\x00\x01\x00";

/// Write `bytes` to a temporary sibling and rename it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Create `dir` if needed and check that files can be written there.
pub fn ensure_writable_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"").map_err(|e| Error::io(dir, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

/// Split CSV text into numeric rows, skipping blank lines, `#` comments and
/// a non-numeric header on the first data line.
fn numeric_rows(path: &Path, text: &str, columns: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut rows = Vec::new();
    let mut seen_data = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: std::result::Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(vals) => {
                if vals.len() < columns {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message: format!("expected {columns} columns, found {}", vals.len()),
                    });
                }
                rows.push((i + 1, vals));
                seen_data = true;
            }
            Err(_) if !seen_data && rows.is_empty() => {
                // header line
                seen_data = true;
            }
            Err(e) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(rows)
}

/// Pressure waveform from a two-column CSV `time_s,pressure_pa` (header
/// optional). The samples are taken as one period; when `period` is `None`
/// it is the sampled span plus one sample interval.
pub fn load_waveform(path: &Path, period: Option<f64>) -> Result<ActuationWaveform> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_waveform(path, &text, period)
}

pub fn parse_waveform(path: &Path, text: &str, period: Option<f64>) -> Result<ActuationWaveform> {
    let rows = numeric_rows(path, text, 2)?;
    if rows.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "waveform has no samples".into(),
        });
    }
    for w in rows.windows(2) {
        if !(w[1].1[0] > w[0].1[0]) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("time is not strictly increasing at line {}", w[1].0),
            });
        }
    }
    let t0 = rows[0].1[0];
    let samples: Vec<(f64, f64)> = rows.iter().map(|(_, r)| (r[0] - t0, r[1])).collect();
    let span = samples[samples.len() - 1].0;
    let period = match period {
        Some(p) => p,
        None if samples.len() > 1 => span + span / (samples.len() - 1) as f64,
        None => 1.0,
    };
    ActuationWaveform::new(samples, period, 0.0).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Master curve CSV `omega_rad_s,G_storage,G_loss` (header optional).
pub fn load_curve(path: &Path) -> Result<MasterCurve> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = numeric_rows(path, &text, 3)?;
    if rows.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "curve has no samples".into(),
        });
    }
    let samples = rows
        .into_iter()
        .map(|(_, r)| CurveSample {
            omega: r[0],
            storage: r[1],
            loss: r[2],
        })
        .collect();
    MasterCurve::new(samples).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn curve_to_csv(curve: &MasterCurve) -> String {
    let mut s = String::from("omega_rad_s,G_storage,G_loss\n");
    for c in &curve.samples {
        s.push_str(&format!("{:e},{:e},{:e}\n", c.omega, c.storage, c.loss));
    }
    s
}

/// Scalar field on a regular lattice, `values[(i*ny + j)*nz + k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityVolume {
    pub dims: [usize; 3],
    pub spacing: f64,
    pub origin: [f64; 3],
    pub values: Vec<f64>,
}

impl DensityVolume {
    pub fn new(dims: [usize; 3], spacing: f64, origin: [f64; 3], values: Vec<f64>) -> Result<Self> {
        let v = DensityVolume {
            dims,
            spacing,
            origin,
            values,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Validation("volume dimensions must be > 0".into()));
        }
        if self.values.len() != self.dims.iter().product::<usize>() {
            return Err(Error::Validation("volume value count does not match dimensions".into()));
        }
        if !(self.spacing > 0.0) {
            return Err(Error::Validation("volume spacing must be > 0".into()));
        }
        if let Some(v) = self.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("volume value {v} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + i as f64 * self.spacing,
            self.origin[1] + j as f64 * self.spacing,
            self.origin[2] + k as f64 * self.spacing,
        ]
    }

    /// Multilinear interpolation at `x`; zero outside the lattice. Axes of
    /// extent one are sampled at their single layer.
    pub fn sample(&self, x: [f64; 3]) -> f64 {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            if self.dims[a] == 1 {
                continue;
            }
            let u = (x[a] - self.origin[a]) / self.spacing;
            if !(u >= 0.0 && u <= (self.dims[a] - 1) as f64) {
                return 0.0;
            }
            let i = (u.floor() as usize).min(self.dims[a] - 2);
            base[a] = i;
            frac[a] = u - i as f64;
        }
        let mut acc = 0.0;
        for corner in 0..8usize {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let bit = (corner >> a) & 1;
                if self.dims[a] == 1 {
                    if bit == 1 {
                        w = 0.0;
                    }
                    continue;
                }
                idx[a] = base[a] + bit;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w != 0.0 {
                acc += w * self.get(idx[0], idx[1], idx[2]);
            }
        }
        acc
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 24 + 32 + 8 * self.values.len());
        out.extend_from_slice(VOLUME_MAGIC);
        for d in self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.spacing.to_le_bytes());
        for o in self.origin {
            out.extend_from_slice(&o.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        if bytes.len() < 72 || &bytes[..16] != VOLUME_MAGIC {
            return Err(fmt("not a density volume (bad magic or truncated header)"));
        }
        let u = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let f = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let dims = [u(16) as usize, u(24) as usize, u(32) as usize];
        let spacing = f(40);
        let origin = [f(48), f(56), f(64)];
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| fmt("volume dimensions overflow"))?;
        if bytes.len() != 72 + 8 * n {
            return Err(fmt(&format!("expected {} value bytes, found {}", 8 * n, bytes.len() - 72)));
        }
        let values = (0..n).map(|i| f(72 + 8 * i)).collect();
        DensityVolume::new(dims, spacing, origin, values).map_err(|e| fmt(&e.to_string()))
    }

    /// CSV with a `# dims`, `# spacing`, `# origin` preamble and one
    /// `i,j,k,x,y,z,gamma` row per point.
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# dims {} {} {}\n# spacing {:e}\n# origin {:e} {:e} {:e}\ni,j,k,x_m,y_m,z_m,gamma\n",
            self.dims[0], self.dims[1], self.dims[2], self.spacing, self.origin[0], self.origin[1], self.origin[2]
        );
        for i in 0..self.dims[0] {
            for j in 0..self.dims[1] {
                for k in 0..self.dims[2] {
                    let p = self.point(i, j, k);
                    s.push_str(&format!("{i},{j},{k},{:e},{:e},{:e},{:e}\n", p[0], p[1], p[2], self.get(i, j, k)));
                }
            }
        }
        s
    }

    pub fn from_csv(path: &Path, text: &str) -> Result<Self> {
        let fmt = |m: String| Error::Format {
            path: path.to_path_buf(),
            message: m,
        };
        let mut dims = None;
        let mut spacing = None;
        let mut origin = None;
        for line in text.lines().filter(|l| l.starts_with('#')) {
            let parts: Vec<&str> = line[1..].split_whitespace().collect();
            let nums = |k: usize| -> Result<Vec<f64>> {
                parts[1..]
                    .iter()
                    .map(|p| p.parse::<f64>().map_err(|e| fmt(e.to_string())))
                    .collect::<Result<Vec<_>>>()
                    .and_then(|v| if v.len() == k { Ok(v) } else { Err(fmt(format!("bad {} line", parts[0]))) })
            };
            match parts.first() {
                Some(&"dims") => {
                    let v = nums(3)?;
                    dims = Some([v[0] as usize, v[1] as usize, v[2] as usize]);
                }
                Some(&"spacing") => spacing = Some(nums(1)?[0]),
                Some(&"origin") => {
                    let v = nums(3)?;
                    origin = Some([v[0], v[1], v[2]]);
                }
                _ => {}
            }
        }
        let (dims, spacing, origin) = match (dims, spacing, origin) {
            (Some(d), Some(s), Some(o)) => (d, s, o),
            _ => return Err(fmt("missing dims/spacing/origin preamble".into())),
        };
        let body: String = text.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n");
        let rows = numeric_rows(path, &body, 7)?;
        let mut values = vec![f64::NAN; dims.iter().product()];
        for (line, r) in rows {
            let (i, j, k) = (r[0] as usize, r[1] as usize, r[2] as usize);
            if i >= dims[0] || j >= dims[1] || k >= dims[2] {
                return Err(fmt(format!("index out of range at line {line}")));
            }
            values[(i * dims[1] + j) * dims[2] + k] = r[6];
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(fmt("volume CSV does not cover every point".into()));
        }
        DensityVolume::new(dims, spacing, origin, values).map_err(|e| fmt(e.to_string()))
    }
}

pub fn read_volume(path: &Path) -> Result<DensityVolume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(VOLUME_MAGIC) {
        DensityVolume::from_bytes(path, &bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::Format {
            path: path.to_path_buf(),
            message: "neither a binary volume nor UTF-8 CSV".into(),
        })?;
        DensityVolume::from_csv(path, &text)
    }
}

pub fn write_volume(path: &Path, volume: &DensityVolume) -> Result<()> {
    let is_csv = path.extension().is_some_and(|e| e == "csv");
    if is_csv {
        atomic_write(path, volume.to_csv().as_bytes())
    } else {
        atomic_write(path, &volume.to_bytes())
    }
}

/// Lattice index of a seeded particle position.
fn lattice_index<const D: usize>(x: &Vector<D>, origin: &[f64], spacing: f64) -> [usize; 3] {
    let mut idx = [0usize; 3];
    for a in 0..D {
        idx[a] = ((x[a] - origin[a]) / spacing - 0.5).round() as usize;
    }
    idx
}

/// Density on the undeformed particle lattice: design particles carry
/// `gamma`, chamber walls 1, chamber air 0, with one void layer around the
/// body so level sets close.
pub fn density_volume<const D: usize>(problem: &Problem<D>, gamma: &[f64]) -> Result<DensityVolume> {
    let ps = &problem.sim.template;
    if gamma.len() != problem.design_positions.len() {
        return Err(Error::Validation("design length does not match problem".into()));
    }
    let s = problem.particle_spacing;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for x in &ps.state.position {
        for a in 0..D {
            lo[a] = lo[a].min(x[a]);
            hi[a] = hi[a].max(x[a]);
        }
    }
    let mut dims = [1usize; 3];
    let mut origin = [0.0; 3];
    for a in 0..D {
        dims[a] = ((hi[a] - lo[a]) / s).round() as usize + 3;
        origin[a] = lo[a] - s;
    }
    let mut values = vec![0.0; dims.iter().product()];
    let body_origin: Vec<f64> = (0..D).map(|a| origin[a] + s - 0.5 * s).collect();
    for p in 0..ps.len() {
        let mut idx = lattice_index(&ps.state.position[p], &body_origin, s);
        for item in idx.iter_mut().take(D) {
            *item += 1;
        }
        let v = match (ps.phase[p], ps.design_index[p]) {
            (Phase::Design, Some(di)) => gamma[di],
            (Phase::Wall, _) => 1.0,
            _ => 0.0,
        };
        values[(idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]] = v;
    }
    DensityVolume::new(dims, s, origin, values)
}

/// Per-particle CSV snapshot: position, phase and density.
pub fn snapshot_csv<const D: usize>(positions: &[Vector<D>], particles: &ParticleSet<D>, gamma: &[f64]) -> String {
    let mut s = String::from("x_m,y_m,z_m,phase,gamma\n");
    for (p, x) in positions.iter().enumerate() {
        let z = if D == 3 { x[2] } else { 0.0 };
        let (phase, g) = match (particles.phase[p], particles.design_index[p]) {
            (Phase::Design, Some(di)) => ("design", gamma[di]),
            (Phase::Wall, _) => ("wall", 1.0),
            _ => ("fluid", 0.0),
        };
        s.push_str(&format!("{:e},{:e},{:e},{phase},{:e}\n", x[0], x[1], z, g));
    }
    s
}

/// Per-design-particle gradient dump.
pub fn gradient_csv<const D: usize>(positions: &[Vector<D>], gamma: &[f64], dgamma: &[f64], dphi: &[f64]) -> String {
    let mut s = String::from("index,x_m,y_m,z_m,gamma,dL_dgamma,dL_dphi\n");
    for (i, x) in positions.iter().enumerate() {
        let z = if D == 3 { x[2] } else { 0.0 };
        s.push_str(&format!(
            "{i},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            x[0], x[1], z, gamma[i], dgamma[i], dphi[i]
        ));
    }
    s
}

/// Default output directory: `$SOROMORPH_OUT` or `./out`.
pub fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn waveform_with_and_without_header() {
        let p = Path::new("w.csv");
        let a = parse_waveform(p, "time_s,pressure_pa\n0,0\n0.1,80000\n", None).unwrap();
        let b = parse_waveform(p, "0,0\n0.1,80000\n", None).unwrap();
        assert_eq!(a, b);
        assert!((a.period() - 0.2).abs() < 1e-15);
        assert!(matches!(parse_waveform(p, "", None), Err(Error::Format { .. })));
        assert!(matches!(parse_waveform(p, "0,0\n0.2,1\n0.1,2\n", None), Err(Error::Format { .. })));
    }

    #[test]
    fn volume_binary_and_csv_round_trip() {
        let v = DensityVolume::new([2, 3, 1], 0.5, [1.0, -2.0, 0.0], vec![0.0, 0.1, 0.2, 0.3, 0.4, 1.0]).unwrap();
        let p = Path::new("v.bin");
        assert_eq!(DensityVolume::from_bytes(p, &v.to_bytes()).unwrap(), v);
        assert_eq!(DensityVolume::from_csv(p, &v.to_csv()).unwrap(), v);
        assert!(DensityVolume::from_bytes(p, &v.to_bytes()[..60]).is_err());
        assert!(DensityVolume::new([1, 1, 1], 1.0, [0.0; 3], vec![1.5]).is_err());
    }
}
