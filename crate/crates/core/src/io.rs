//! On-disk formats: the MAXTOMO1 volume container (one JSON header line +
//! raw little-endian payload), the JSON run configuration, calibration
//! weight files, trace tables and 16-bit PGM slice export.
//!
//! Grids are persisted as dims + resolution only; files follow the
//! centered-grid convention (bounding box centered on the origin).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationConfig;
use crate::coil::{make_loop_array, LoopArraySpec, LoopLumped, LoopShape, WireCoil};
use crate::cost::WeightMode;
use crate::ep::EpMap;
use crate::error::{Error, Result};
use crate::forward::{B1Set, SolverConfig};
use crate::gmt::{ForwardMode, GmtBounds, GmtConfig};
use crate::grid::VoxelGrid;
use crate::phantom::{CompartmentEp, PhantomSpec, SphereLayer};
use crate::scalar::Cplx;

pub const MAGIC: &str = "MAXTOMO1";
const ORDER: &str = "x-fastest little-endian";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    magic: String,
    kind: String,
    dims: [usize; 3],
    resolution_m: f64,
    channels: usize,
    dtype: String,
    order: String,
}

/// Any volume file content.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    EpMap(EpMap<f64>),
    B1Set(B1Set<f64>),
    Field {
        grid: VoxelGrid<f64>,
        channels: Vec<Vec<Cplx<f64>>>,
    },
}

fn write_header<W: Write>(w: &mut W, header: &VolumeHeader) -> Result<()> {
    let line = serde_json::to_string(header).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    Ok(())
}

fn write_f64s<W: Write>(w: &mut W, data: &[f64]) -> Result<()> {
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_c128s<W: Write>(w: &mut W, data: &[Cplx<f64>]) -> Result<()> {
    for v in data {
        w.write_all(&v.re.to_le_bytes())?;
        w.write_all(&v.im.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_epmap(path: &Path, ep: &EpMap<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = VolumeHeader {
        magic: MAGIC.into(),
        kind: "epmap".into(),
        dims: ep.grid.dims(),
        resolution_m: ep.grid.resolution(),
        channels: 3,
        dtype: "f64".into(),
        order: ORDER.into(),
    };
    write_header(&mut w, &header)?;
    write_f64s(&mut w, &ep.eps_r)?;
    write_f64s(&mut w, &ep.sigma_e)?;
    let mask: Vec<f64> = ep.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    write_f64s(&mut w, &mask)?;
    w.flush()?;
    Ok(())
}

pub fn write_b1set(path: &Path, b1: &B1Set<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = VolumeHeader {
        magic: MAGIC.into(),
        kind: "b1set".into(),
        dims: b1.grid.dims(),
        resolution_m: b1.grid.resolution(),
        channels: b1.channel_count(),
        dtype: "c128".into(),
        order: ORDER.into(),
    };
    write_header(&mut w, &header)?;
    for ch in &b1.channels {
        write_c128s(&mut w, ch)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_field(path: &Path, grid: &VoxelGrid<f64>, channels: &[Vec<Cplx<f64>>]) -> Result<()> {
    let n = grid.len();
    if channels.iter().any(|c| c.len() != n) {
        return Err(Error::invalid("field channel length mismatch"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    let header = VolumeHeader {
        magic: MAGIC.into(),
        kind: "field".into(),
        dims: grid.dims(),
        resolution_m: grid.resolution(),
        channels: channels.len(),
        dtype: "c128".into(),
        order: ORDER.into(),
    };
    write_header(&mut w, &header)?;
    for ch in channels {
        write_c128s(&mut w, ch)?;
    }
    w.flush()?;
    Ok(())
}

fn read_header_and_payload(path: &Path) -> Result<(VolumeHeader, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    let nl = raw
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header line".into()))?;
    let header: VolumeHeader = serde_json::from_slice(&raw[..nl])
        .map_err(|e| Error::Format(format!("bad volume header: {e}")))?;
    if header.magic != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", header.magic)));
    }
    if header.order != ORDER {
        return Err(Error::Format(format!("unsupported order {:?}", header.order)));
    }
    let payload = raw[nl + 1..].to_vec();
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    let elem = match header.dtype.as_str() {
        "f64" => 8,
        "c128" => 16,
        other => return Err(Error::Format(format!("unsupported dtype {other:?}"))),
    };
    let expect = n * header.channels * elem;
    if payload.len() != expect {
        return Err(Error::Format(format!(
            "payload length {} does not match header ({} expected)",
            payload.len(),
            expect
        )));
    }
    Ok((header, payload))
}

fn f64_at(payload: &[u8], idx: usize) -> f64 {
    let b: [u8; 8] = payload[idx * 8..idx * 8 + 8].try_into().unwrap();
    f64::from_le_bytes(b)
}

fn read_f64s(payload: &[u8], start: usize, count: usize) -> Vec<f64> {
    (0..count).map(|i| f64_at(payload, start + i)).collect()
}

fn read_c128s(payload: &[u8], start_scalar: usize, count: usize) -> Vec<Cplx<f64>> {
    (0..count)
        .map(|i| {
            let re = f64_at(payload, start_scalar + 2 * i);
            let im = f64_at(payload, start_scalar + 2 * i + 1);
            Cplx::new(re, im)
        })
        .collect()
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let (header, payload) = read_header_and_payload(path)?;
    let grid = VoxelGrid::centered(header.dims, header.resolution_m)?;
    let n = grid.len();
    match (header.kind.as_str(), header.dtype.as_str()) {
        ("epmap", "f64") => {
            if header.channels != 3 {
                return Err(Error::Format("epmap requires 3 channels".into()));
            }
            let eps_r = read_f64s(&payload, 0, n);
            let sigma = read_f64s(&payload, n, n);
            let mask_f = read_f64s(&payload, 2 * n, n);
            let mask: Vec<bool> = mask_f
                .iter()
                .map(|&v| {
                    if v == 1.0 {
                        Ok(true)
                    } else if v == 0.0 {
                        Ok(false)
                    } else {
                        Err(Error::Format("mask channel must be exactly 0 or 1".into()))
                    }
                })
                .collect::<Result<_>>()?;
            Ok(Volume::EpMap(EpMap::new(grid, eps_r, sigma, mask)?))
        }
        ("b1set", "c128") => {
            let channels = (0..header.channels)
                .map(|c| read_c128s(&payload, 2 * c * n, n))
                .collect();
            Ok(Volume::B1Set(B1Set::new(grid, channels)?))
        }
        ("field", "c128") => {
            let channels = (0..header.channels)
                .map(|c| read_c128s(&payload, 2 * c * n, n))
                .collect();
            Ok(Volume::Field { grid, channels })
        }
        (kind, dtype) => Err(Error::Format(format!(
            "unsupported kind/dtype combination {kind:?}/{dtype:?}"
        ))),
    }
}

pub fn read_epmap(path: &Path) -> Result<EpMap<f64>> {
    match read_volume(path)? {
        Volume::EpMap(e) => Ok(e),
        _ => Err(Error::Format("expected an epmap volume".into())),
    }
}

pub fn read_b1set(path: &Path) -> Result<B1Set<f64>> {
    match read_volume(path)? {
        Volume::B1Set(b) => Ok(b),
        _ => Err(Error::Format("expected a b1set volume".into())),
    }
}

// ---------------------------------------------------------------------------
// run configuration

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dims: [usize; 3],
    pub resolution_m: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpConfig {
    pub eps_r: f64,
    pub sigma_s_per_m: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum PhantomConfig {
    Cylinder {
        #[serde(default)]
        center_m: [f64; 3],
        radius_m: f64,
        length_m: f64,
        eps_r: f64,
        sigma_s_per_m: f64,
    },
    TwoCompartmentCylinder {
        #[serde(default)]
        center_m: [f64; 3],
        outer_radius_m: f64,
        length_m: f64,
        #[serde(default)]
        inner_offset_m: [f64; 2],
        inner_radius_m: f64,
        outer: EpConfig,
        inner: EpConfig,
    },
    LayeredSphere {
        #[serde(default)]
        center_m: [f64; 3],
        layers: Vec<SphereLayerConfig>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SphereLayerConfig {
    pub radius_m: f64,
    pub eps_r: f64,
    pub sigma_s_per_m: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LumpedConfig {
    pub node_offset: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacitance_pf: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resistance_ohm: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoilConfig {
    pub channels: usize,
    #[serde(default = "default_loop_shape")]
    pub shape: String,
    pub former_radius_m: f64,
    pub former_length_m: f64,
    pub segments_per_loop: usize,
    pub wire_radius_m: f64,
    #[serde(default = "default_drive")]
    pub drive_v: f64,
    #[serde(default)]
    pub lumped: Vec<LumpedConfig>,
}

fn default_loop_shape() -> String {
    "circle".into()
}

fn default_drive() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_solver_iters")]
    pub max_iters: usize,
    #[serde(default = "default_restart")]
    pub restart: usize,
}

fn default_tol() -> f64 {
    1e-6
}
fn default_solver_iters() -> usize {
    1000
}
fn default_restart() -> usize {
    50
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            max_iters: default_solver_iters(),
            restart: default_restart(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    #[serde(default = "default_eps_min")]
    pub eps_r_min: f64,
    #[serde(default = "default_eps_max")]
    pub eps_r_max: f64,
    #[serde(default)]
    pub sigma_min_s_per_m: f64,
    #[serde(default = "default_sigma_max")]
    pub sigma_max_s_per_m: f64,
}

fn default_eps_min() -> f64 {
    1.05
}
fn default_eps_max() -> f64 {
    100.0
}
fn default_sigma_max() -> f64 {
    3.0
}

impl Default for BoundsSection {
    fn default() -> Self {
        Self {
            eps_r_min: default_eps_min(),
            eps_r_max: default_eps_max(),
            sigma_min_s_per_m: 0.0,
            sigma_max_s_per_m: default_sigma_max(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialGuessSection {
    #[serde(default = "default_init_eps")]
    pub eps_r: f64,
    #[serde(default = "default_init_sigma")]
    pub sigma_s_per_m: f64,
}

fn default_init_eps() -> f64 {
    21.1
}
fn default_init_sigma() -> f64 {
    0.2
}

impl Default for InitialGuessSection {
    fn default() -> Self {
        Self {
            eps_r: default_init_eps(),
            sigma_s_per_m: default_init_sigma(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmtSection {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_weight_mode")]
    pub weight_mode: String,
    #[serde(default = "default_gmt_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub bounds: BoundsSection,
    #[serde(default)]
    pub initial_guess: InitialGuessSection,
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shim_voxel: Option<[usize; 3]>,
    #[serde(default = "default_memory")]
    pub memory: usize,
}

fn default_alpha() -> f64 {
    2e-4
}
fn default_weight_mode() -> String {
    "sqrt".into()
}
fn default_gmt_iters() -> usize {
    500
}
fn default_mode() -> String {
    "vsie".into()
}
fn default_memory() -> usize {
    10
}

impl Default for GmtSection {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            weight_mode: default_weight_mode(),
            max_iters: default_gmt_iters(),
            bounds: BoundsSection::default(),
            initial_guess: InitialGuessSection::default(),
            mode: default_mode(),
            shim_voxel: None,
            memory: default_memory(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub snr: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    #[serde(default = "default_gmt_iters")]
    pub max_iters: usize,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self {
            max_iters: default_gmt_iters(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsSection {
    #[serde(default = "default_out_dir")]
    pub dir: String,
}

fn default_out_dir() -> String {
    "out".into()
}

impl Default for OutputsSection {
    fn default() -> Self {
        Self {
            dir: default_out_dir(),
        }
    }
}

fn default_frequency() -> f64 {
    297.2e6
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridConfig,
    #[serde(default = "default_frequency")]
    pub frequency_hz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epmap_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coil: Option<CoilConfig>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub gmt: GmtSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSection>,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub outputs: OutputsSection,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("run config: {e}")))
    }

    pub fn grid(&self) -> Result<VoxelGrid<f64>> {
        VoxelGrid::centered(self.grid.dims, self.grid.resolution_m)
    }

    pub fn omega(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.frequency_hz
    }

    pub fn phantom_spec(&self) -> Result<PhantomSpec<f64>> {
        let p = self
            .phantom
            .as_ref()
            .ok_or_else(|| Error::invalid("config has no phantom section"))?;
        Ok(match p {
            PhantomConfig::Cylinder {
                center_m,
                radius_m,
                length_m,
                eps_r,
                sigma_s_per_m,
            } => PhantomSpec::Cylinder {
                center: *center_m,
                radius: *radius_m,
                length: *length_m,
                ep: CompartmentEp {
                    eps_r: *eps_r,
                    sigma_e: *sigma_s_per_m,
                },
            },
            PhantomConfig::TwoCompartmentCylinder {
                center_m,
                outer_radius_m,
                length_m,
                inner_offset_m,
                inner_radius_m,
                outer,
                inner,
            } => PhantomSpec::TwoCompartmentCylinder {
                center: *center_m,
                outer_radius: *outer_radius_m,
                length: *length_m,
                inner_offset: *inner_offset_m,
                inner_radius: *inner_radius_m,
                outer: CompartmentEp {
                    eps_r: outer.eps_r,
                    sigma_e: outer.sigma_s_per_m,
                },
                inner: CompartmentEp {
                    eps_r: inner.eps_r,
                    sigma_e: inner.sigma_s_per_m,
                },
            },
            PhantomConfig::LayeredSphere { center_m, layers } => PhantomSpec::LayeredSphere {
                center: *center_m,
                layers: layers
                    .iter()
                    .map(|l| SphereLayer {
                        radius: l.radius_m,
                        ep: CompartmentEp {
                            eps_r: l.eps_r,
                            sigma_e: l.sigma_s_per_m,
                        },
                    })
                    .collect(),
            },
        })
    }

    pub fn coil(&self) -> Result<WireCoil<f64>> {
        let c = self
            .coil
            .as_ref()
            .ok_or_else(|| Error::invalid("config has no coil section"))?;
        let shape = match c.shape.as_str() {
            "circle" => LoopShape::Circle,
            "rectangle" => LoopShape::Rectangle,
            other => return Err(Error::invalid(format!("unknown loop shape {other:?}"))),
        };
        let omega = self.omega();
        let lumped = c
            .lumped
            .iter()
            .map(|l| {
                let mut z = Cplx::new(0.0, 0.0);
                if let Some(pf) = l.capacitance_pf {
                    if pf <= 0.0 {
                        return Err(Error::invalid("capacitance must be positive"));
                    }
                    z += Cplx::new(0.0, -1.0 / (omega * pf * 1e-12));
                }
                if let Some(r) = l.resistance_ohm {
                    z += Cplx::new(r, 0.0);
                }
                Ok(LoopLumped {
                    node_offset: l.node_offset,
                    impedance: z,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        make_loop_array(&LoopArraySpec {
            channels: c.channels,
            shape,
            former_radius: c.former_radius_m,
            former_length: c.former_length_m,
            segments_per_loop: c.segments_per_loop,
            wire_radius: c.wire_radius_m,
            center: [0.0; 3],
            lumped,
            drive_voltage: c.drive_v,
        })
    }

    pub fn solver_config(&self) -> SolverConfig<f64> {
        SolverConfig {
            tol: self.solver.tol,
            max_iters: self.solver.max_iters,
            restart: self.solver.restart,
        }
    }

    pub fn weight_mode(&self) -> Result<WeightMode> {
        match self.gmt.weight_mode.as_str() {
            "sqrt" => Ok(WeightMode::Sqrt),
            "linear" => Ok(WeightMode::Linear),
            other => Err(Error::invalid(format!("unknown weight mode {other:?}"))),
        }
    }

    pub fn forward_mode(&self) -> Result<ForwardMode> {
        match self.gmt.mode.as_str() {
            "vie" => Ok(ForwardMode::Vie),
            "vsie" => Ok(ForwardMode::Vsie),
            other => Err(Error::invalid(format!("unknown forward mode {other:?}"))),
        }
    }

    pub fn gmt_config(&self, grid: &VoxelGrid<f64>) -> Result<GmtConfig<f64>> {
        let shim_voxel = match self.gmt.shim_voxel {
            None => None,
            Some([i, j, k]) => {
                let [nx, ny, nz] = grid.dims();
                if i >= nx || j >= ny || k >= nz {
                    return Err(Error::invalid("shim voxel outside the grid"));
                }
                Some(grid.linear(i, j, k))
            }
        };
        Ok(GmtConfig {
            alpha: self.gmt.alpha,
            weight_mode: self.weight_mode()?,
            max_iters: self.gmt.max_iters,
            bounds: GmtBounds {
                eps_min: self.gmt.bounds.eps_r_min,
                eps_max: self.gmt.bounds.eps_r_max,
                sigma_min: self.gmt.bounds.sigma_min_s_per_m,
                sigma_max: self.gmt.bounds.sigma_max_s_per_m,
            },
            init_eps_r: self.gmt.initial_guess.eps_r,
            init_sigma: self.gmt.initial_guess.sigma_s_per_m,
            mode: self.forward_mode()?,
            shim_voxel,
            memory: self.gmt.memory,
            solver: self.solver_config(),
        })
    }

    pub fn calibration_config(&self) -> CalibrationConfig {
        CalibrationConfig {
            max_iters: self.calibration.max_iters,
            memory: 10,
        }
    }
}

// ---------------------------------------------------------------------------
// weights file, trace table, PGM slices

/// Calibration weights JSON: channel id -> [re, im].
pub fn write_weights(path: &Path, q: &[Cplx<f64>]) -> Result<()> {
    let map: BTreeMap<String, [f64; 2]> = q
        .iter()
        .enumerate()
        .map(|(l, c)| (l.to_string(), [c.re, c.im]))
        .collect();
    let text = serde_json::to_string_pretty(&map).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<Vec<Cplx<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let map: BTreeMap<String, [f64; 2]> =
        serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = vec![Cplx::new(0.0, 0.0); map.len()];
    for (k, v) in map {
        let idx: usize = k
            .parse()
            .map_err(|_| Error::Format(format!("bad channel id {k:?}")))?;
        if idx >= out.len() {
            return Err(Error::Format("non-contiguous channel ids".into()));
        }
        out[idx] = Cplx::new(v[0], v[1]);
    }
    Ok(out)
}

/// Tab-separated optimization trace.
pub fn write_trace(path: &Path, trace: &crate::gmt::OptTrace<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "iter\tf\tf_d\tf_r\tgrad_inf\tcoil_error")?;
    for r in &trace.records {
        let coil = match r.coil_error {
            Some(c) => format!("{c:.12e}"),
            None => "".into(),
        };
        writeln!(
            w,
            "{}\t{:.12e}\t{:.12e}\t{:.12e}\t{:.12e}\t{}",
            r.iter, r.f, r.f_d, r.f_r, r.grad_inf, coil
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Extract a 2-D slice (width, height, values) from an x-fastest volume.
pub fn slice_volume(
    dims: [usize; 3],
    data: &[f64],
    axis: usize,
    index: usize,
) -> Result<(usize, usize, Vec<f64>)> {
    let [nx, ny, nz] = dims;
    if axis > 2 {
        return Err(Error::invalid("axis must be 0 (x), 1 (y) or 2 (z)"));
    }
    if index >= dims[axis] {
        return Err(Error::invalid("slice index out of range"));
    }
    let lin = |i: usize, j: usize, k: usize| i + nx * (j + ny * k);
    let (w, h, values) = match axis {
        0 => {
            let mut v = Vec::with_capacity(ny * nz);
            for k in 0..nz {
                for j in 0..ny {
                    v.push(data[lin(index, j, k)]);
                }
            }
            (ny, nz, v)
        }
        1 => {
            let mut v = Vec::with_capacity(nx * nz);
            for k in 0..nz {
                for i in 0..nx {
                    v.push(data[lin(i, index, k)]);
                }
            }
            (nx, nz, v)
        }
        _ => {
            let mut v = Vec::with_capacity(nx * ny);
            for j in 0..ny {
                for i in 0..nx {
                    v.push(data[lin(i, j, index)]);
                }
            }
            (nx, ny, v)
        }
    };
    Ok((w, h, values))
}

/// 16-bit binary PGM with min/max windowing; returns the window used.
pub fn write_pgm16(path: &Path, width: usize, height: usize, data: &[f64]) -> Result<(f64, f64)> {
    if data.len() != width * height {
        return Err(Error::invalid("slice size mismatch"));
    }
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{width} {height}\n65535\n")?;
    for &v in data {
        let q = if span > 0.0 {
            (((v - lo) / span) * 65535.0).round().clamp(0.0, 65535.0) as u16
        } else {
            0
        };
        w.write_all(&q.to_be_bytes())?;
    }
    w.flush()?;
    Ok((lo, hi))
}

/// Sidecar annotation for an exported slice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceSidecar {
    pub source: String,
    pub kind: String,
    pub channel: usize,
    pub component: String,
    pub axis: String,
    pub index: usize,
    pub width: usize,
    pub height: usize,
    pub value_min: f64,
    pub value_max: f64,
}

pub fn write_sidecar(path: &Path, sidecar: &SliceSidecar) -> Result<()> {
    let text = serde_json::to_string_pretty(sidecar).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}
