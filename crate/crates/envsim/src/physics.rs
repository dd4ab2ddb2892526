//! Equations of motion, rewards and scene drawing for the built-in tasks.
//!
//! All integrators are semi-implicit Euler: velocities are updated first and
//! the new velocities move the positions.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::render::{Canvas, Viewport};

pub const GRAVITY: f64 = 9.8;

pub mod cartpole {
    pub const CART_MASS: f64 = 1.0;
    pub const POLE_MASS: f64 = 0.1;
    /// Distance from pivot to the pole's centre of mass.
    pub const HALF_LENGTH: f64 = 0.5;
    pub const FORCE_SCALE: f64 = 10.0;
    /// Track limit; the cart stops dead at either end.
    pub const TRACK_LIMIT: f64 = 2.5;
    pub const CART_HALF_WIDTH: f64 = 0.2;
    pub const CART_HALF_HEIGHT: f64 = 0.1;
}

pub mod reacher {
    pub const LINK_LENGTHS: [f64; 2] = [1.0, 1.0];
    /// Joint velocity per unit action, rad/s.
    pub const SPEED_SCALE: f64 = 2.0;
    /// Reward distance scale: the full arm length.
    pub const REACH: f64 = 2.0;
    pub const TARGET_RADIUS: f64 = 0.15;
}

pub mod cup {
    /// Cup speed per unit action, m/s.
    pub const SPEED_SCALE: f64 = 2.0;
    pub const RAIL_LIMIT: f64 = 1.8;
    pub const HALF_WIDTH: f64 = 0.25;
    pub const DEPTH: f64 = 0.3;
    pub const BALL_RADIUS: f64 = 0.07;
    /// The tether is anchored at the centre of the cup's bottom.
    pub const TETHER_LENGTH: f64 = 0.9;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CartpoleState {
    pub x: f64,
    pub x_dot: f64,
    /// Pole angle from upright, positive leaning towards +x.
    pub theta: f64,
    pub theta_dot: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReacherState {
    /// Shoulder and elbow angles; the elbow angle is relative to the first link.
    pub q: [f64; 2],
    pub target: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CupState {
    pub cup_x: f64,
    pub cup_vx: f64,
    pub ball: [f64; 2],
    pub ball_v: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Body {
    Cartpole(CartpoleState),
    Reacher(ReacherState),
    Cup(CupState),
}

/// Full simulator state. Never shown to the agent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhysicsState {
    pub body: Body,
    /// Physics steps taken since reset.
    pub step: u32,
}

impl PhysicsState {
    pub fn is_finite(&self) -> bool {
        self.body.to_vec().iter().all(|v| v.is_finite())
    }
}

impl Body {
    /// Flat coordinates, in declaration order of the variant's fields.
    pub fn to_vec(&self) -> Vec<f64> {
        match *self {
            Body::Cartpole(s) => vec![s.x, s.x_dot, s.theta, s.theta_dot],
            Body::Reacher(s) => vec![s.q[0], s.q[1], s.target[0], s.target[1]],
            Body::Cup(s) => vec![s.cup_x, s.cup_vx, s.ball[0], s.ball[1], s.ball_v[0], s.ball_v[1]],
        }
    }

    /// Rebuilds a body of the same kind as `self` from [`Body::to_vec`] output.
    pub fn with_values(&self, v: &[f64]) -> Option<Body> {
        Some(match (self, v) {
            (Body::Cartpole(_), &[x, x_dot, theta, theta_dot]) => Body::Cartpole(CartpoleState { x, x_dot, theta, theta_dot }),
            (Body::Reacher(_), &[a, b, c, d]) => Body::Reacher(ReacherState { q: [a, b], target: [c, d] }),
            (Body::Cup(_), &[cx, cvx, bx, by, bvx, bvy]) => {
                Body::Cup(CupState { cup_x: cx, cup_vx: cvx, ball: [bx, by], ball_v: [bvx, bvy] })
            }
            _ => return None,
        })
    }
}

/// Cart-pole swing-up start: pole hanging down with a small random tilt.
/// Draws one value: the tilt `U(−0.05, 0.05)`.
pub fn cartpole_initial(rng: &mut ChaCha8Rng) -> CartpoleState {
    let tilt = rng.random_range(-0.05..0.05);
    CartpoleState { x: 0.0, x_dot: 0.0, theta: PI + tilt, theta_dot: 0.0 }
}

/// Reacher start. Draws, in order: shoulder angle, elbow angle, target angle
/// (all `U(−π, π)`), then target radius `U(0.4, 1.8)`.
pub fn reacher_initial(rng: &mut ChaCha8Rng) -> ReacherState {
    let q0 = rng.random_range(-PI..PI);
    let q1 = rng.random_range(-PI..PI);
    let angle: f64 = rng.random_range(-PI..PI);
    let radius = rng.random_range(0.4..1.8);
    ReacherState { q: [q0, q1], target: [radius * angle.cos(), radius * angle.sin()] }
}

/// Ball-in-cup start. Draws, in order: cup position `U(−0.5, 0.5)` and the
/// ball's swing angle from vertical `U(−0.5, 0.5)`; the ball hangs at rest
/// on a taut tether.
pub fn cup_initial(rng: &mut ChaCha8Rng) -> CupState {
    let cup_x = rng.random_range(-0.5..0.5);
    let phi: f64 = rng.random_range(-0.5..0.5);
    let ball = [cup_x + cup::TETHER_LENGTH * phi.sin(), -cup::TETHER_LENGTH * phi.cos()];
    CupState { cup_x, cup_vx: 0.0, ball, ball_v: [0.0, 0.0] }
}

fn cartpole_step(s: CartpoleState, a: f64, dt: f64) -> CartpoleState {
    use cartpole::*;
    let total = CART_MASS + POLE_MASS;
    let (sin, cos) = s.theta.sin_cos();
    let force = FORCE_SCALE * a;
    let temp = (force + POLE_MASS * HALF_LENGTH * s.theta_dot * s.theta_dot * sin) / total;
    let theta_acc = (GRAVITY * sin - cos * temp) / (HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / total));
    let x_acc = temp - POLE_MASS * HALF_LENGTH * theta_acc * cos / total;

    let mut x_dot = s.x_dot + dt * x_acc;
    let mut x = s.x + dt * x_dot;
    if x.abs() > TRACK_LIMIT {
        x = x.clamp(-TRACK_LIMIT, TRACK_LIMIT);
        x_dot = 0.0;
    }
    let theta_dot = s.theta_dot + dt * theta_acc;
    let theta = s.theta + dt * theta_dot;
    CartpoleState { x, x_dot, theta, theta_dot }
}

fn reacher_step(s: ReacherState, a: &[f64], dt: f64) -> ReacherState {
    let mut q = s.q;
    for (q, a) in q.iter_mut().zip(a) {
        *q += dt * reacher::SPEED_SCALE * a;
    }
    ReacherState { q, ..s }
}

fn ball_in_cup(cup_x: f64, ball: [f64; 2]) -> bool {
    let rel_y = ball[1];
    (ball[0] - cup_x).abs() <= cup::HALF_WIDTH && (0.0..=cup::DEPTH).contains(&rel_y)
}

fn cup_step(s: CupState, a: f64, dt: f64) -> CupState {
    use cup::*;
    let mut cup_vx = SPEED_SCALE * a;
    let mut cup_x = s.cup_x + dt * cup_vx;
    if cup_x.abs() > RAIL_LIMIT {
        cup_x = cup_x.clamp(-RAIL_LIMIT, RAIL_LIMIT);
        cup_vx = 0.0;
    }

    let mut v = [s.ball_v[0], s.ball_v[1] - dt * GRAVITY];
    let mut p = [s.ball[0] + dt * v[0], s.ball[1] + dt * v[1]];

    // the cup holds a ball that was already within its walls
    let inner = HALF_WIDTH - BALL_RADIUS;
    let prev_rel = [s.ball[0] - s.cup_x, s.ball[1]];
    if prev_rel[0].abs() <= HALF_WIDTH && prev_rel[1] >= BALL_RADIUS && p[1] < BALL_RADIUS {
        p[1] = BALL_RADIUS;
        v[1] = v[1].max(0.0);
    }
    if prev_rel[0].abs() <= HALF_WIDTH && (BALL_RADIUS..=DEPTH).contains(&prev_rel[1]) {
        let rel = p[0] - cup_x;
        if rel.abs() > inner {
            p[0] = cup_x + rel.clamp(-inner, inner);
            v[0] = cup_vx;
        }
    }

    // inextensible tether: project back onto the circle, drop outward velocity
    let d = [p[0] - cup_x, p[1]];
    let dist = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if dist > TETHER_LENGTH {
        let n = [d[0] / dist, d[1] / dist];
        p = [cup_x + n[0] * TETHER_LENGTH, n[1] * TETHER_LENGTH];
        let outward = (v[0] - cup_vx) * n[0] + v[1] * n[1];
        if outward > 0.0 {
            v[0] -= outward * n[0];
            v[1] -= outward * n[1];
        }
    }
    CupState { cup_x, cup_vx, ball: p, ball_v: v }
}

/// Advances one physics step of length `dt`. Action components are clamped
/// to `[−1, 1]`.
pub fn physics_step(state: &PhysicsState, action: &[f64], dt: f64) -> PhysicsState {
    let a = |i: usize| action.get(i).copied().unwrap_or(0.0).clamp(-1.0, 1.0);
    let body = match state.body {
        Body::Cartpole(s) => Body::Cartpole(cartpole_step(s, a(0), dt)),
        Body::Reacher(s) => Body::Reacher(reacher_step(s, &[a(0), a(1)], dt)),
        Body::Cup(s) => Body::Cup(cup_step(s, a(0), dt)),
    };
    PhysicsState { body, step: state.step + 1 }
}

pub fn fingertip(s: &ReacherState) -> [f64; 2] {
    let [l0, l1] = reacher::LINK_LENGTHS;
    let elbow = [l0 * s.q[0].cos(), l0 * s.q[0].sin()];
    let q = s.q[0] + s.q[1];
    [elbow[0] + l1 * q.cos(), elbow[1] + l1 * q.sin()]
}

/// Reward for being in `state`, in `[0, 1]`.
pub fn reward(state: &PhysicsState) -> f64 {
    match state.body {
        Body::Cartpole(s) => (1.0 + s.theta.cos()) / 2.0,
        Body::Reacher(s) => {
            let tip = fingertip(&s);
            let d = ((tip[0] - s.target[0]).powi(2) + (tip[1] - s.target[1]).powi(2)).sqrt();
            (1.0 - d / reacher::REACH).max(0.0)
        }
        Body::Cup(s) => {
            if ball_in_cup(s.cup_x, s.ball) {
                1.0
            } else {
                0.0
            }
        }
    }
}

const BACKGROUND: [u8; 3] = [24, 28, 38];

/// Draws the scene of `state` into a fresh 3×100×100 frame.
pub fn render(state: &PhysicsState) -> Vec<u8> {
    match state.body {
        Body::Cartpole(s) => {
            use cartpole::*;
            let view = Viewport { view_center: [0.0, 0.0], pixels_per_meter: 100.0 / 6.0 };
            let mut c = Canvas::new(view, BACKGROUND);
            c.rect([-3.0, -0.02], [3.0, 0.02], [90, 90, 100]);
            c.rect([s.x - CART_HALF_WIDTH, -CART_HALF_HEIGHT], [s.x + CART_HALF_WIDTH, CART_HALF_HEIGHT], [200, 120, 50]);
            let tip = [s.x + 2.0 * HALF_LENGTH * s.theta.sin(), 2.0 * HALF_LENGTH * s.theta.cos()];
            c.segment([s.x, 0.0], tip, 0.05, [230, 210, 130]);
            c.into_frame()
        }
        Body::Reacher(s) => {
            let view = Viewport { view_center: [0.0, 0.0], pixels_per_meter: 100.0 / 4.8 };
            let mut c = Canvas::new(view, BACKGROUND);
            c.circle(s.target, reacher::TARGET_RADIUS, [220, 60, 60]);
            let l0 = reacher::LINK_LENGTHS[0];
            let elbow = [l0 * s.q[0].cos(), l0 * s.q[0].sin()];
            let tip = fingertip(&s);
            c.segment([0.0, 0.0], elbow, 0.06, [90, 160, 220]);
            c.segment(elbow, tip, 0.06, [120, 190, 240]);
            c.circle([0.0, 0.0], 0.1, [200, 200, 200]);
            c.into_frame()
        }
        Body::Cup(s) => {
            use cup::*;
            let view = Viewport { view_center: [0.0, -0.3], pixels_per_meter: 25.0 };
            let mut c = Canvas::new(view, BACKGROUND);
            let wall = 0.04;
            c.segment([s.cup_x, 0.0], s.ball, 0.02, [150, 150, 150]);
            c.rect([s.cup_x - HALF_WIDTH - wall, -wall], [s.cup_x + HALF_WIDTH + wall, 0.0], [80, 200, 120]);
            c.rect([s.cup_x - HALF_WIDTH - wall, 0.0], [s.cup_x - HALF_WIDTH, DEPTH], [80, 200, 120]);
            c.rect([s.cup_x + HALF_WIDTH, 0.0], [s.cup_x + HALF_WIDTH + wall, DEPTH], [80, 200, 120]);
            c.circle(s.ball, BALL_RADIUS, [240, 200, 60]);
            c.into_frame()
        }
    }
}
