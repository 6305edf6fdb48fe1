//! Classic-control environments and a small instruction-following grid.
//!
//! Dynamics constants follow the Gymnasium definitions of CartPole-v1,
//! MountainCar-v0 and Acrobot-v1.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::DenseVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvId {
    CartPole,
    MountainCar,
    Acrobot,
    TextGrid,
}

impl EnvId {
    pub const ALL: [EnvId; 4] = [
        EnvId::CartPole,
        EnvId::MountainCar,
        EnvId::Acrobot,
        EnvId::TextGrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnvId::CartPole => "cartpole",
            EnvId::MountainCar => "mountaincar",
            EnvId::Acrobot => "acrobot",
            EnvId::TextGrid => "textgrid",
        }
    }

    pub fn action_count(self) -> usize {
        match self {
            EnvId::CartPole => 2,
            EnvId::MountainCar | EnvId::Acrobot => 3,
            EnvId::TextGrid => 4,
        }
    }

    pub fn obs_dim(self) -> usize {
        match self {
            EnvId::CartPole | EnvId::TextGrid => 4,
            EnvId::MountainCar => 2,
            EnvId::Acrobot => 6,
        }
    }

    /// Step cap at which an episode is truncated.
    pub fn max_steps(self) -> usize {
        match self {
            EnvId::CartPole | EnvId::Acrobot => 500,
            EnvId::MountainCar => 200,
            EnvId::TextGrid => 100,
        }
    }

    /// Lowest and highest achievable episode return.
    pub fn return_range(self) -> (f64, f64) {
        match self {
            EnvId::CartPole => (0.0, 500.0),
            EnvId::MountainCar => (-200.0, 0.0),
            EnvId::Acrobot => (-500.0, 0.0),
            EnvId::TextGrid => (-1.0, 1.0),
        }
    }

    /// Maps a return onto `[0, 1]` using [`EnvId::return_range`].
    pub fn normalized_return(self, ret: f64) -> f64 {
        let (lo, hi) = self.return_range();
        ((ret - lo) / (hi - lo)).clamp(0.0, 1.0)
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cartpole" | "cartpole-v1" => Ok(EnvId::CartPole),
            "mountaincar" | "mountaincar-v0" => Ok(EnvId::MountainCar),
            "acrobot" | "acrobot-v1" => Ok(EnvId::Acrobot),
            "textgrid" => Ok(EnvId::TextGrid),
            _ => Err(Error::UnknownEnv(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: DenseVector,
    pub reward: f64,
    pub done: bool,
    pub truncated: bool,
}

/// One running episode. `done` is absorbing until the next [`reset`].
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    id: EnvId,
    physics: Vec<f64>,
    steps: usize,
    done: bool,
    instruction: Option<String>,
}

impl EnvState {
    pub fn id(&self) -> EnvId {
        self.id
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn instruction(&self) -> Option<&str> {
        self.instruction.as_deref()
    }

    pub fn obs(&self) -> DenseVector {
        match self.id {
            EnvId::Acrobot => {
                let s = &self.physics;
                DenseVector(vec![
                    s[0].cos(),
                    s[0].sin(),
                    s[1].cos(),
                    s[1].sin(),
                    s[2],
                    s[3],
                ])
            }
            _ => DenseVector(self.physics.clone()),
        }
    }

    /// Raw simulator state: angles and velocities for Acrobot, the observation otherwise.
    pub fn physics(&self) -> &[f64] {
        &self.physics
    }
}

pub fn reset(id: EnvId, rng: &mut RngStream) -> EnvState {
    let mut instruction = None;
    let physics = match id {
        EnvId::CartPole => (0..4).map(|_| rng.uniform_range(-0.05, 0.05)).collect(),
        EnvId::MountainCar => vec![rng.uniform_range(-0.6, -0.4), 0.0],
        EnvId::Acrobot => (0..4).map(|_| rng.uniform_range(-0.1, 0.1)).collect(),
        EnvId::TextGrid => {
            let cells = GRID * GRID;
            let start = GRID_START.0 * GRID + GRID_START.1;
            let mut t = rng.below(cells - 1);
            if t >= start {
                t += 1;
            }
            let (tr, tc) = (t / GRID, t % GRID);
            let color = COLORS[rng.below(COLORS.len())];
            instruction = Some(format!("go to the {color} cell at row {tr} column {tc}"));
            vec![
                GRID_START.0 as f64,
                GRID_START.1 as f64,
                tr as f64,
                tc as f64,
            ]
        }
    };
    EnvState {
        id,
        physics,
        steps: 0,
        done: false,
        instruction,
    }
}

pub fn step(state: &mut EnvState, action: usize) -> Result<StepResult> {
    if state.done {
        return Err(Error::EpisodeDone);
    }
    if action >= state.id.action_count() {
        return Err(Error::Invalid(format!(
            "action {action} out of range for {} ({} actions)",
            state.id,
            state.id.action_count()
        )));
    }
    let (reward, terminated) = match state.id {
        EnvId::CartPole => cartpole_step(&mut state.physics, action),
        EnvId::MountainCar => mountaincar_step(&mut state.physics, action),
        EnvId::Acrobot => acrobot_step(&mut state.physics, action),
        EnvId::TextGrid => textgrid_step(&mut state.physics, action),
    };
    state.steps += 1;
    let truncated = !terminated && state.steps >= state.id.max_steps();
    state.done = terminated || truncated;
    Ok(StepResult {
        obs: state.obs(),
        reward,
        done: terminated,
        truncated,
    })
}

const CP_GRAVITY: f64 = 9.8;
const CP_MASS_CART: f64 = 1.0;
const CP_MASS_POLE: f64 = 0.1;
const CP_HALF_LENGTH: f64 = 0.5;
const CP_FORCE: f64 = 10.0;
const CP_TAU: f64 = 0.02;
const CP_THETA_LIMIT: f64 = 12.0 * 2.0 * PI / 360.0;
const CP_X_LIMIT: f64 = 2.4;

fn cartpole_step(s: &mut [f64], action: usize) -> (f64, bool) {
    let (x, x_dot, theta, theta_dot) = (s[0], s[1], s[2], s[3]);
    let force = if action == 1 { CP_FORCE } else { -CP_FORCE };
    let total = CP_MASS_CART + CP_MASS_POLE;
    let pml = CP_MASS_POLE * CP_HALF_LENGTH;
    let (sin, cos) = theta.sin_cos();
    let temp = (force + pml * theta_dot * theta_dot * sin) / total;
    let theta_acc = (CP_GRAVITY * sin - cos * temp)
        / (CP_HALF_LENGTH * (4.0 / 3.0 - CP_MASS_POLE * cos * cos / total));
    let x_acc = temp - pml * theta_acc * cos / total;
    s[0] = x + CP_TAU * x_dot;
    s[1] = x_dot + CP_TAU * x_acc;
    s[2] = theta + CP_TAU * theta_dot;
    s[3] = theta_dot + CP_TAU * theta_acc;
    let terminated = s[0].abs() > CP_X_LIMIT || s[2].abs() > CP_THETA_LIMIT;
    (1.0, terminated)
}

fn mountaincar_step(s: &mut [f64], action: usize) -> (f64, bool) {
    let (mut pos, mut vel) = (s[0], s[1]);
    vel += (action as f64 - 1.0) * 0.001 - 0.0025 * (3.0 * pos).cos();
    vel = vel.clamp(-0.07, 0.07);
    pos = (pos + vel).clamp(-1.2, 0.6);
    if pos == -1.2 && vel < 0.0 {
        vel = 0.0;
    }
    s[0] = pos;
    s[1] = vel;
    (-1.0, pos >= 0.5 && vel >= 0.0)
}

const AB_L1: f64 = 1.0;
const AB_M1: f64 = 1.0;
const AB_M2: f64 = 1.0;
const AB_LC1: f64 = 0.5;
const AB_LC2: f64 = 0.5;
const AB_I: f64 = 1.0;
const AB_G: f64 = 9.8;
const AB_DT: f64 = 0.2;
const AB_MAX_VEL_1: f64 = 4.0 * PI;
const AB_MAX_VEL_2: f64 = 9.0 * PI;

fn acrobot_derivs(s: &[f64; 4], torque: f64) -> [f64; 4] {
    let [t1, t2, dt1, dt2] = *s;
    let d1 = AB_M1 * AB_LC1 * AB_LC1
        + AB_M2 * (AB_L1 * AB_L1 + AB_LC2 * AB_LC2 + 2.0 * AB_L1 * AB_LC2 * t2.cos())
        + 2.0 * AB_I;
    let d2 = AB_M2 * (AB_LC2 * AB_LC2 + AB_L1 * AB_LC2 * t2.cos()) + AB_I;
    let phi2 = AB_M2 * AB_LC2 * AB_G * (t1 + t2 - PI / 2.0).cos();
    let phi1 = -AB_M2 * AB_L1 * AB_LC2 * dt2 * dt2 * t2.sin()
        - 2.0 * AB_M2 * AB_L1 * AB_LC2 * dt2 * dt1 * t2.sin()
        + (AB_M1 * AB_LC1 + AB_M2 * AB_L1) * AB_G * (t1 - PI / 2.0).cos()
        + phi2;
    let ddt2 = (torque + d2 / d1 * phi1 - AB_M2 * AB_L1 * AB_LC2 * dt1 * dt1 * t2.sin() - phi2)
        / (AB_M2 * AB_LC2 * AB_LC2 + AB_I - d2 * d2 / d1);
    let ddt1 = -(d2 * ddt2 + phi1) / d1;
    [dt1, dt2, ddt1, ddt2]
}

/// One classical fourth-order Runge-Kutta step of the two-link dynamics.
pub fn acrobot_rk4(s: &[f64; 4], torque: f64, dt: f64) -> [f64; 4] {
    let add = |a: &[f64; 4], b: &[f64; 4], h: f64| -> [f64; 4] {
        [
            a[0] + h * b[0],
            a[1] + h * b[1],
            a[2] + h * b[2],
            a[3] + h * b[3],
        ]
    };
    let k1 = acrobot_derivs(s, torque);
    let k2 = acrobot_derivs(&add(s, &k1, dt / 2.0), torque);
    let k3 = acrobot_derivs(&add(s, &k2, dt / 2.0), torque);
    let k4 = acrobot_derivs(&add(s, &k3, dt), torque);
    let mut out = *s;
    for i in 0..4 {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Kinetic plus potential energy of an Acrobot state `[θ1, θ2, θ̇1, θ̇2]`.
pub fn acrobot_energy(s: &[f64; 4]) -> f64 {
    let [t1, t2, dt1, dt2] = *s;
    let d1 = AB_M1 * AB_LC1 * AB_LC1
        + AB_M2 * (AB_L1 * AB_L1 + AB_LC2 * AB_LC2 + 2.0 * AB_L1 * AB_LC2 * t2.cos())
        + 2.0 * AB_I;
    let d2 = AB_M2 * (AB_LC2 * AB_LC2 + AB_L1 * AB_LC2 * t2.cos()) + AB_I;
    let m22 = AB_M2 * AB_LC2 * AB_LC2 + AB_I;
    let kinetic = 0.5 * (d1 * dt1 * dt1 + 2.0 * d2 * dt1 * dt2 + m22 * dt2 * dt2);
    let y1 = -AB_LC1 * t1.cos();
    let y2 = -AB_L1 * t1.cos() - AB_LC2 * (t1 + t2).cos();
    kinetic + AB_G * (AB_M1 * y1 + AB_M2 * y2)
}

fn wrap_angle(x: f64) -> f64 {
    let span = 2.0 * PI;
    let mut y = x;
    while y > PI {
        y -= span;
    }
    while y < -PI {
        y += span;
    }
    y
}

fn acrobot_step(s: &mut [f64], action: usize) -> (f64, bool) {
    let torque = action as f64 - 1.0;
    let cur = [s[0], s[1], s[2], s[3]];
    let next = acrobot_rk4(&cur, torque, AB_DT);
    s[0] = wrap_angle(next[0]);
    s[1] = wrap_angle(next[1]);
    s[2] = next[2].clamp(-AB_MAX_VEL_1, AB_MAX_VEL_1);
    s[3] = next[3].clamp(-AB_MAX_VEL_2, AB_MAX_VEL_2);
    let terminal = -s[0].cos() - (s[1] + s[0]).cos() > 1.0;
    (if terminal { 0.0 } else { -1.0 }, terminal)
}

pub const GRID: usize = 7;
pub const GRID_START: (usize, usize) = (0, 0);
const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
const STEP_PENALTY: f64 = 0.01;

/// Actions: 0 up, 1 down, 2 left, 3 right. Moves into a wall leave the agent in place.
fn textgrid_step(s: &mut [f64], action: usize) -> (f64, bool) {
    let (mut r, mut c) = (s[0] as usize, s[1] as usize);
    match action {
        0 => r = r.saturating_sub(1),
        1 => r = (r + 1).min(GRID - 1),
        2 => c = c.saturating_sub(1),
        _ => c = (c + 1).min(GRID - 1),
    }
    s[0] = r as f64;
    s[1] = c as f64;
    let reached = s[0] == s[2] && s[1] == s[3];
    (
        if reached {
            1.0 - STEP_PENALTY
        } else {
            -STEP_PENALTY
        },
        reached,
    )
}
