use super::{Normalization, Trajectory};
use crate::error::{invalid, Error, Result};
use crate::rng::DyRng;
use crate::Tensor;
use rand_distr::{Distribution, Normal};

/// Snapshot channels: position x, position y, momentum x, momentum y.
pub const MESH_CHANNELS: usize = 4;

const BLOW_UP: f64 = 1e12;

/// A rectangular grid of point masses joined to their horizontal and
/// vertical neighbours by Hookean springs.
#[derive(Debug, Clone, PartialEq)]
pub struct SpringMeshSystem {
    pub rows: usize,
    pub cols: usize,
    pub mass: f64,
    pub spring_constant: f64,
    pub rest_length: f64,
    /// Row-major; `true` marks an anchored particle.
    pub fixed: Vec<bool>,
    pub dt: f64,
}

/// Positions and momenta, row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshState {
    pub pos: Vec<[f64; 2]>,
    pub mom: Vec<[f64; 2]>,
}

impl SpringMeshSystem {
    /// Unit masses and springs with the top row anchored.
    pub fn new(rows: usize, cols: usize) -> Self {
        let fixed = (0..rows * cols).map(|idx| idx < cols).collect();
        Self { rows, cols, mass: 1.0, spring_constant: 1.0, rest_length: 1.0, fixed, dt: 1e-3 }
    }

    pub fn n_particles(&self) -> usize {
        self.rows * self.cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(invalid("mesh needs at least one row and column"));
        }
        if !(self.mass > 0.0 && self.spring_constant > 0.0 && self.dt > 0.0) {
            return Err(invalid("mass, spring constant and dt must be positive"));
        }
        if !(self.rest_length >= 0.0) {
            return Err(invalid("rest length must be non-negative"));
        }
        if self.fixed.len() != self.n_particles() {
            return Err(invalid(format!(
                "fixed mask has {} entries for {} particles",
                self.fixed.len(),
                self.n_particles()
            )));
        }
        Ok(())
    }

    /// Neighbour pairs joined by a spring.
    pub fn springs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                let idx = r * self.cols + c;
                if c + 1 < self.cols {
                    out.push((idx, idx + 1));
                }
                if r + 1 < self.rows {
                    out.push((idx, idx + self.cols));
                }
            }
        }
        out
    }

    /// Particles at rest on the lattice, row 0 at the top (largest y).
    pub fn rest_state(&self) -> MeshState {
        let n = self.n_particles();
        let pos = (0..n)
            .map(|idx| {
                let (r, c) = (idx / self.cols, idx % self.cols);
                [c as f64 * self.rest_length, -(r as f64) * self.rest_length]
            })
            .collect();
        MeshState { pos, mom: vec![[0.0; 2]; n] }
    }

    /// Rest lattice with free particles displaced by `N(0, sigma^2)` and
    /// momenta drawn from `N(0, sigma^2)`.
    pub fn random_state(&self, sigma: f64, rng: &mut DyRng) -> Result<MeshState> {
        let normal = Normal::new(0.0, sigma).map_err(|e| invalid(e.to_string()))?;
        let mut state = self.rest_state();
        for idx in 0..self.n_particles() {
            if self.fixed[idx] {
                continue;
            }
            for d in 0..2 {
                state.pos[idx][d] += normal.sample(rng);
                state.mom[idx][d] = normal.sample(rng);
            }
        }
        Ok(state)
    }

    fn forces(&self, pos: &[[f64; 2]], springs: &[(usize, usize)]) -> Vec<[f64; 2]> {
        let mut f = vec![[0.0; 2]; pos.len()];
        for &(a, b) in springs {
            let d = [pos[b][0] - pos[a][0], pos[b][1] - pos[a][1]];
            let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
            if len == 0.0 {
                continue;
            }
            let mag = self.spring_constant * (len - self.rest_length) / len;
            for k in 0..2 {
                f[a][k] += mag * d[k];
                f[b][k] -= mag * d[k];
            }
        }
        f
    }

    /// Advances `state` by `steps` velocity-Verlet steps of size `self.dt`.
    /// `on_step` is called after each step with the 1-based step index.
    pub fn integrate(
        &self,
        state: &mut MeshState,
        steps: usize,
        mut on_step: impl FnMut(usize, &MeshState) -> Result<()>,
    ) -> Result<()> {
        self.validate()?;
        let springs = self.springs();
        let half = 0.5 * self.dt;
        let mut f = self.forces(&state.pos, &springs);
        for step in 1..=steps {
            for idx in 0..state.pos.len() {
                if self.fixed[idx] {
                    continue;
                }
                for k in 0..2 {
                    state.mom[idx][k] += half * f[idx][k];
                    state.pos[idx][k] += self.dt * state.mom[idx][k] / self.mass;
                }
            }
            f = self.forces(&state.pos, &springs);
            for idx in 0..state.pos.len() {
                if self.fixed[idx] {
                    continue;
                }
                for k in 0..2 {
                    state.mom[idx][k] += half * f[idx][k];
                }
            }
            let magnitude = state
                .pos
                .iter()
                .chain(&state.mom)
                .flat_map(|v| v.iter())
                .fold(0.0f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { f64::INFINITY });
            if magnitude > BLOW_UP {
                return Err(Error::BlowUp { step, magnitude });
            }
            on_step(step, state)?;
        }
        Ok(())
    }

    fn snapshot(&self, state: &MeshState, out: &mut Vec<f64>) {
        for ch in 0..MESH_CHANNELS {
            let (src, k) = if ch < 2 { (&state.pos, ch) } else { (&state.mom, ch - 2) };
            out.extend(src.iter().map(|v| v[k]));
        }
    }
}

/// Total kinetic plus spring potential energy.
pub fn mesh_energy(system: &SpringMeshSystem, state: &MeshState) -> f64 {
    let kinetic: f64 = state
        .mom
        .iter()
        .zip(&system.fixed)
        .filter(|(_, fixed)| !**fixed)
        .map(|(p, _)| (p[0] * p[0] + p[1] * p[1]) / (2.0 * system.mass))
        .sum();
    let potential: f64 = system
        .springs()
        .iter()
        .map(|&(a, b)| {
            let d = [state.pos[b][0] - state.pos[a][0], state.pos[b][1] - state.pos[a][1]];
            let stretch = (d[0] * d[0] + d[1] * d[1]).sqrt() - system.rest_length;
            0.5 * system.spring_constant * stretch * stretch
        })
        .sum();
    kinetic + potential
}

/// Unnormalized snapshots of shape `(T, 4, rows, cols)` with
/// `T = steps / stride + 1` (the initial state is snapshot 0).
pub fn simulate_spring_mesh_raw(
    system: &SpringMeshSystem,
    initial: &MeshState,
    steps: usize,
    stride: usize,
) -> Result<Tensor> {
    system.validate()?;
    if steps == 0 || stride == 0 {
        return Err(invalid("steps and stride must be at least 1"));
    }
    let n = system.n_particles();
    if initial.pos.len() != n || initial.mom.len() != n {
        return Err(invalid(format!("initial state does not have {n} particles")));
    }
    if initial.pos.iter().chain(&initial.mom).flatten().any(|v| !v.is_finite()) {
        return Err(invalid("initial state must be finite"));
    }
    let mut data = Vec::new();
    system.snapshot(initial, &mut data);
    let mut state = initial.clone();
    system.integrate(&mut state, steps, |step, s| {
        if step % stride == 0 {
            system.snapshot(s, &mut data);
        }
        Ok(())
    })?;
    let t = steps / stride + 1;
    Tensor::new(vec![t, MESH_CHANNELS, system.rows, system.cols], data)
}

/// Simulates and normalizes. With `stats == None` the per-channel statistics
/// are fitted on this trajectory (training split); otherwise the supplied
/// statistics are applied (validation and test splits).
pub fn simulate_spring_mesh(
    system: &SpringMeshSystem,
    initial: &MeshState,
    steps: usize,
    stride: usize,
    stats: Option<&Normalization>,
) -> Result<Trajectory> {
    let raw = simulate_spring_mesh_raw(system, initial, steps, stride)?;
    let stats = match stats {
        Some(s) => s.clone(),
        None => Normalization::fit(&[&raw])?,
    };
    let id = format!("spring-mesh-{}x{}", system.rows, system.cols);
    Trajectory::from_raw(id, &raw, system.dt * stride as f64, stats)
}
