//! Scenario configuration, built-in presets, and on-disk stores for
//! matrices and simulation trajectories.
//!
//! A scenario is a self-contained JSON document: gas constants, topology,
//! per-pipe geometry and mesh, boundary signals, uniform initial fields,
//! and solver settings. Matrices are stored in a small versioned binary
//! format that round-trips `f64` data bitwise; trajectory stores carry the
//! SHA-256 of the canonical scenario JSON so stale artifacts are rejected
//! instead of silently reused.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gas::{GasConstants, PipeParams};
use crate::graph::{NetworkGraph, Pipe};
use crate::network::{
    assemble_network, FlowBc, NetworkInputs, NetworkSystem, NetworkUnknowns, NodeBc,
};
use crate::pipe::PipeState;
use crate::signals::Signal;
use crate::solver::{consistent_init, SnapshotSet, SolverConfig};

/// Magic bytes of the binary matrix format.
pub const MATRIX_MAGIC: &[u8; 4] = b"PHGN";
/// Version of the binary matrix format.
pub const MATRIX_VERSION: u32 = 1;
/// Version of the trajectory store metadata.
pub const STORE_VERSION: u32 = 1;

/// One pipe of a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipeConfig {
    /// Pipe identifier.
    pub id: String,
    /// Tail node identifier (the pipe's x = 0 end, nominal inflow).
    pub from: String,
    /// Head node identifier (the pipe's x = L end).
    pub to: String,
    /// Physical parameters.
    #[serde(flatten)]
    pub params: PipeParams,
    /// Number of finite elements.
    pub n_elements: usize,
}

/// Uniform initial fields of one pipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialField {
    /// Pipe identifier.
    pub pipe: String,
    /// Initial density.
    pub rho: f64,
    /// Initial mass flux.
    pub m: f64,
    /// Initial internal energy density.
    pub e: f64,
}

/// A complete, self-contained simulation scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Human-readable scenario name.
    pub name: String,
    /// Gas constants.
    pub gas: GasConstants,
    /// Node identifiers.
    pub nodes: Vec<String>,
    /// Pipes.
    pub pipes: Vec<PipeConfig>,
    /// Boundary conditions, one per boundary node.
    pub boundary: Vec<NodeBc>,
    /// Uniform initial fields, one per pipe.
    pub initial: Vec<InitialField>,
    /// Time integration settings.
    #[serde(default)]
    pub solver: SolverConfig,
}

impl ScenarioConfig {
    /// Parses a scenario from JSON and validates it structurally.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes the scenario as pretty-printed JSON.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Loads and validates a scenario file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Structural validation that does not require building the system:
    /// positive parameters, known identifiers, signals well-formed, one
    /// initial field per pipe, positive initial density/energy.
    pub fn validate(&self) -> Result<()> {
        GasConstants::new(self.gas.r, self.gas.c_v)?;
        self.solver.validate()?;
        if self.pipes.is_empty() {
            return Err(Error::InvalidConfig("scenario has no pipes".into()));
        }
        for p in &self.pipes {
            p.params.validate()?;
            if p.n_elements == 0 {
                return Err(Error::InvalidConfig(format!(
                    "pipe '{}' needs at least one element",
                    p.id
                )));
            }
            for node in [&p.from, &p.to] {
                if !self.nodes.contains(node) {
                    return Err(Error::InvalidConfig(format!(
                        "pipe '{}' references unknown node '{node}'",
                        p.id
                    )));
                }
            }
        }
        for bc in &self.boundary {
            if !self.nodes.contains(&bc.node) {
                return Err(Error::InvalidConfig(format!(
                    "boundary condition references unknown node '{}'",
                    bc.node
                )));
            }
            match &bc.flow {
                FlowBc::MassFlow { signal } | FlowBc::Density { signal } => signal.validate()?,
            }
            if let Some(sig) = &bc.energy {
                sig.validate()?;
            }
        }
        for p in &self.pipes {
            let hits = self.initial.iter().filter(|f| f.pipe == p.id).count();
            if hits != 1 {
                return Err(Error::InvalidConfig(format!(
                    "pipe '{}' needs exactly one initial field, found {hits}",
                    p.id
                )));
            }
        }
        for f in &self.initial {
            if self.pipes.iter().all(|p| p.id != f.pipe) {
                return Err(Error::InvalidConfig(format!(
                    "initial field references unknown pipe '{}'",
                    f.pipe
                )));
            }
            if !(f.rho > 0.0) || !(f.e > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "initial density and energy on pipe '{}' must be positive",
                    f.pipe
                )));
            }
        }
        Ok(())
    }

    /// Builds the network system and the consistent initial unknown vector.
    pub fn build(&self) -> Result<(NetworkSystem, NetworkUnknowns)> {
        self.validate()?;
        let node_index = |id: &str| {
            self.nodes
                .iter()
                .position(|n| n == id)
                .expect("validated above")
        };
        let pipes: Vec<Pipe> = self
            .pipes
            .iter()
            .map(|p| Pipe {
                id: p.id.clone(),
                tail: node_index(&p.from),
                head: node_index(&p.to),
                params: p.params,
                n_elements: p.n_elements,
                flow_hint: 1,
            })
            .collect();
        let graph = NetworkGraph::new(self.nodes.clone(), pipes)?;
        let sys = assemble_network(graph, self.gas, NetworkInputs { bcs: self.boundary.clone() })?;
        let states: Vec<PipeState> = sys
            .graph
            .pipes
            .iter()
            .enumerate()
            .map(|(w, p)| {
                let f = self
                    .initial
                    .iter()
                    .find(|f| f.pipe == p.id)
                    .expect("validated above");
                PipeState::uniform(&sys.meshes[w], f.rho, f.m, f.e)
            })
            .collect();
        let y0 = consistent_init(&sys, &states, 0.0)?;
        Ok((sys, y0))
    }

    /// SHA-256 of the canonical (compact) JSON encoding, as lowercase hex.
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_string(self)?;
        let digest = Sha256::digest(canonical.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Names of the built-in scenarios.
pub const PRESET_NAMES: [&str; 4] =
    ["single-pipe", "single-pipe-density", "diamond", "diamond-mixed"];

/// Returns a built-in scenario by name (see [`PRESET_NAMES`]).
pub fn preset(name: &str) -> Result<ScenarioConfig> {
    match name {
        "single-pipe" => Ok(single_pipe_preset()),
        "single-pipe-density" => {
            let mut cfg = single_pipe_preset();
            cfg.name = "single-pipe-density".into();
            // Prescribe the inflow density instead of the mass flow; the
            // boundary flow becomes an extra unknown.
            cfg.boundary[0].flow = FlowBc::Density { signal: Signal::Constant { value: 3.0 } };
            Ok(cfg)
        }
        "diamond" => Ok(diamond_preset()),
        "diamond-mixed" => {
            let mut cfg = diamond_preset();
            cfg.name = "diamond-mixed".into();
            // Saw-tooth inflow energy: 9 + t up to t=2.5, back to 9 at t=5.
            cfg.boundary[0].energy =
                Some(Signal::SawTooth { base: 9.0, rise_until: 2.5, fall_until: 5.0 });
            // Heterogeneous physics: no friction heating on the upper
            // branch, no wall cooling on the lower one.
            for id in ["w2", "w3"] {
                pipe_mut(&mut cfg, id).params.friction_in_energy = false;
            }
            for id in ["w4", "w5"] {
                pipe_mut(&mut cfg, id).params.k_omega = 0.0;
            }
            Ok(cfg)
        }
        other => Err(Error::InvalidConfig(format!(
            "unknown preset '{other}'; available: {}",
            PRESET_NAMES.join(", ")
        ))),
    }
}

fn pipe_mut<'a>(cfg: &'a mut ScenarioConfig, id: &str) -> &'a mut PipeConfig {
    cfg.pipes
        .iter_mut()
        .find(|p| p.id == id)
        .expect("preset pipe ids are fixed")
}

fn base_params() -> PipeParams {
    PipeParams {
        length: 1.0,
        diameter: 0.1,
        lambda_f: 4.0,
        k_omega: 0.5,
        t_inf: 1.0,
        area: 1.0,
        friction_in_energy: true,
    }
}

fn single_pipe_preset() -> ScenarioConfig {
    ScenarioConfig {
        name: "single-pipe".into(),
        gas: GasConstants { r: 1.0, c_v: 2.5 },
        nodes: vec!["v1".into(), "v2".into()],
        pipes: vec![PipeConfig {
            id: "w1".into(),
            from: "v1".into(),
            to: "v2".into(),
            params: base_params(),
            n_elements: 100,
        }],
        boundary: vec![
            NodeBc {
                node: "v1".into(),
                flow: FlowBc::MassFlow { signal: Signal::Constant { value: 0.3 } },
                energy: Some(Signal::Constant { value: 9.0 }),
            },
            NodeBc {
                node: "v2".into(),
                flow: FlowBc::MassFlow { signal: Signal::Constant { value: 0.3 } },
                energy: None,
            },
        ],
        initial: vec![InitialField { pipe: "w1".into(), rho: 3.0, m: 0.3, e: 9.0 }],
        solver: SolverConfig::default(),
    }
}

fn diamond_preset() -> ScenarioConfig {
    let lengths = [0.55, 0.5, 0.5, 0.5, 0.5, 0.55];
    let ends = [(1, 2), (2, 3), (2, 4), (3, 5), (4, 5), (5, 6)];
    let n_elements = [55, 50, 50, 50, 50, 55];
    let pipes = (0..6)
        .map(|k| PipeConfig {
            id: format!("w{}", k + 1),
            from: format!("v{}", ends[k].0),
            to: format!("v{}", ends[k].1),
            params: PipeParams { length: lengths[k], ..base_params() },
            n_elements: n_elements[k],
        })
        .collect();
    let initial = (0..6)
        .map(|k| InitialField {
            pipe: format!("w{}", k + 1),
            rho: 3.0,
            // Full feed flow on the end pipes, split flow on the branches.
            m: if k == 0 || k == 5 { 0.3 } else { 0.15 },
            e: 9.0,
        })
        .collect();
    ScenarioConfig {
        name: "diamond".into(),
        gas: GasConstants { r: 1.0, c_v: 2.5 },
        nodes: (1..=6).map(|i| format!("v{i}")).collect(),
        pipes,
        boundary: vec![
            NodeBc {
                node: "v1".into(),
                flow: FlowBc::Density { signal: Signal::Constant { value: 3.0 } },
                energy: Some(Signal::Constant { value: 9.0 }),
            },
            NodeBc {
                node: "v6".into(),
                flow: FlowBc::MassFlow { signal: Signal::Constant { value: 0.3 } },
                energy: None,
            },
        ],
        initial,
        solver: SolverConfig::default(),
    }
}

/// Writes a matrix in the versioned binary format (bitwise round-trip).
pub fn write_matrix<W: Write>(mut out: W, m: &DMatrix<f64>) -> Result<()> {
    out.write_all(MATRIX_MAGIC)?;
    out.write_all(&MATRIX_VERSION.to_le_bytes())?;
    out.write_all(&[0u8, 2u8])?; // dtype f64, two dimensions
    out.write_all(&(m.nrows() as u64).to_le_bytes())?;
    out.write_all(&(m.ncols() as u64).to_le_bytes())?;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.write_all(&m[(i, j)].to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a matrix written by [`write_matrix`].
pub fn read_matrix<R: Read>(mut input: R) -> Result<DMatrix<f64>> {
    let mut head = [0u8; 4 + 4 + 2 + 8 + 8];
    input.read_exact(&mut head)?;
    if &head[0..4] != MATRIX_MAGIC {
        return Err(Error::Format("not a matrix file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().expect("fixed slice"));
    if version != MATRIX_VERSION {
        return Err(Error::Format(format!(
            "unsupported matrix format version {version} (expected {MATRIX_VERSION})"
        )));
    }
    if head[8] != 0 || head[9] != 2 {
        return Err(Error::Format(format!(
            "unsupported dtype/rank ({}, {})",
            head[8], head[9]
        )));
    }
    let nrows = u64::from_le_bytes(head[10..18].try_into().expect("fixed slice")) as usize;
    let ncols = u64::from_le_bytes(head[18..26].try_into().expect("fixed slice")) as usize;
    let mut data = vec![0u8; nrows * ncols * 8];
    input.read_exact(&mut data)?;
    let mut m = DMatrix::zeros(nrows, ncols);
    let mut k = 0;
    for i in 0..nrows {
        for j in 0..ncols {
            m[(i, j)] = f64::from_le_bytes(data[k..k + 8].try_into().expect("fixed slice"));
            k += 8;
        }
    }
    Ok(m)
}

/// Saves a matrix to a file.
pub fn save_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    write_matrix(fs::File::create(path)?, m)
}

/// Loads a matrix from a file.
pub fn load_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    read_matrix(fs::File::open(path)?)
}

/// Metadata of a trajectory store directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoreMeta {
    version: u32,
    scenario: String,
    config_sha256: String,
}

/// Saves a trajectory to a directory: `states.bin`, `times.bin`,
/// `newton.bin`, and a `meta.json` binding it to the scenario hash.
pub fn save_snapshots(
    dir: impl AsRef<Path>,
    cfg: &ScenarioConfig,
    snaps: &SnapshotSet,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    save_matrix(dir.join("states.bin"), &snaps.states)?;
    save_matrix(
        dir.join("times.bin"),
        &DMatrix::from_iterator(snaps.times.len(), 1, snaps.times.iter().copied()),
    )?;
    save_matrix(
        dir.join("newton.bin"),
        &DMatrix::from_iterator(snaps.newton_iters.len(), 1, snaps.newton_iters.iter().map(|&n| n as f64)),
    )?;
    let meta = StoreMeta {
        version: STORE_VERSION,
        scenario: cfg.name.clone(),
        config_sha256: cfg.hash()?,
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Loads a trajectory store; when a scenario is given, rejects stores whose
/// recorded hash does not match it.
pub fn load_snapshots(
    dir: impl AsRef<Path>,
    expect: Option<&ScenarioConfig>,
) -> Result<SnapshotSet> {
    let dir = dir.as_ref();
    let meta: StoreMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    if meta.version != STORE_VERSION {
        return Err(Error::Format(format!(
            "unsupported trajectory store version {}",
            meta.version
        )));
    }
    if let Some(cfg) = expect {
        let want = cfg.hash()?;
        if meta.config_sha256 != want {
            return Err(Error::InvalidConfig(format!(
                "trajectory store was produced by a different scenario \
                 (stored {}, expected {want})",
                meta.config_sha256
            )));
        }
    }
    let states = load_matrix(dir.join("states.bin"))?;
    let times: Vec<f64> = load_matrix(dir.join("times.bin"))?.iter().copied().collect();
    let newton_iters: Vec<usize> =
        load_matrix(dir.join("newton.bin"))?.iter().map(|&v| v as usize).collect();
    if times.len() != states.ncols() {
        return Err(Error::Format(
            "trajectory store is inconsistent: time and state counts differ".into(),
        ));
    }
    Ok(SnapshotSet { times, states, newton_iters })
}
