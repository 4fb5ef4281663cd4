//! Per-channel dilation blocks and the assembled ancilla unitaries.
//!
//! For a channel `(L, gamma, eta)` and time step `dt` the four blocks are
//!
//! ```text
//! A = sqrt(1 - gamma dt L^dag L)      (no-jump branch)
//! Ã = sqrt(1 - gamma dt L L^dag)
//! B = sqrt((1-eta) gamma dt) L        (recorded jump)
//! C = sqrt(eta gamma dt) L            (postselected-away jump)
//! ```
//!
//! which satisfy `A^dag A + B^dag B + C^dag C = I` exactly. The trajectory
//! engine applies the blocks directly; the full unitaries assembled here are
//! for verification and inspection.

use crate::linalg::{dagger, identity, spectral_norm, zeros, CMat, LinalgError};
use crate::linalg::{cr, hermitian_sqrt};
use crate::model::DissipationChannel;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DilationError {
    #[error(
        "gamma*dt*|L|^2 = {value:.6} > 1 for channel {channel_index}; shrink the time step"
    )]
    TimestepTooLarge { channel_index: usize, value: f64 },
    #[error("blocks were built with eta = {0} != 0; this assembly requires eta = 0")]
    EtaNotZero(f64),
    #[error("blocks were built with eta = {0} != 1; this assembly requires eta = 1")]
    EtaNotOne(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, DilationError>;

/// The four operator blocks of one channel's dilation at one time step.
#[derive(Debug, Clone)]
pub struct DilationBlocks {
    pub a: CMat,
    pub a_tilde: CMat,
    pub b: CMat,
    pub c: CMat,
    pub dt: f64,
    pub channel_index: usize,
    /// eta the blocks were built with (drives assembly validity checks).
    pub eta: f64,
}

/// Build the blocks for one channel. Fails with [`DilationError::TimestepTooLarge`]
/// when `gamma*dt*|L|^2 > 1`, in which case the square roots would not be PSD.
pub fn build_blocks(
    channel: &DissipationChannel,
    dt: f64,
    channel_index: usize,
) -> Result<DilationBlocks> {
    let l_op = &channel.jump_operator;
    let dim = l_op.nrows();
    let gdt = channel.rate * dt;
    let l_norm = spectral_norm(l_op);
    let strength = gdt * l_norm * l_norm;
    if strength > 1.0 + 1e-12 {
        return Err(DilationError::TimestepTooLarge {
            channel_index,
            value: strength,
        });
    }
    let ldl = dagger(l_op).dot(l_op);
    let lld = l_op.dot(&dagger(l_op));
    let a = hermitian_sqrt(&(identity(dim) - ldl.mapv(|z| z * cr(gdt))))?;
    let a_tilde = hermitian_sqrt(&(identity(dim) - lld.mapv(|z| z * cr(gdt))))?;
    let b = l_op.mapv(|z| z * cr(((1.0 - channel.eta) * gdt).sqrt()));
    let c = l_op.mapv(|z| z * cr((channel.eta * gdt).sqrt()));
    Ok(DilationBlocks {
        a,
        a_tilde,
        b,
        c,
        dt,
        channel_index,
        eta: channel.eta,
    })
}

fn place(target: &mut CMat, block: &CMat, row: usize, col: usize) {
    let d = block.nrows();
    target
        .slice_mut(ndarray::s![row * d..(row + 1) * d, col * d..(col + 1) * d])
        .assign(block);
}

/// Two-ancilla dilation unitary
/// `rows (C, B, Ã, 0 / B, -C, 0, Ã / A, 0, -C^dag, -B^dag / 0, A, -B^dag, C^dag)`,
/// acting on `|ancilla(4)> (x) |system>` with the input ancilla state `|00> = e_0`.
pub fn assemble_two_dilation(blocks: &DilationBlocks) -> CMat {
    let d = blocks.a.nrows();
    let mut u = zeros(4 * d, 4 * d);
    let bd = dagger(&blocks.b);
    let cd = dagger(&blocks.c);
    place(&mut u, &blocks.c, 0, 0);
    place(&mut u, &blocks.b, 0, 1);
    place(&mut u, &blocks.a_tilde, 0, 2);
    place(&mut u, &blocks.b, 1, 0);
    place(&mut u, &blocks.c.mapv(|z| -z), 1, 1);
    place(&mut u, &blocks.a_tilde, 1, 3);
    place(&mut u, &blocks.a, 2, 0);
    place(&mut u, &cd.mapv(|z| -z), 2, 2);
    place(&mut u, &bd.mapv(|z| -z), 2, 3);
    place(&mut u, &blocks.a, 3, 1);
    place(&mut u, &bd.mapv(|z| -z), 3, 2);
    place(&mut u, &cd, 3, 3);
    u
}

/// One-ancilla dilation for the plain Lindblad case (`eta = 0`):
/// `[[B, Ã], [A, -B^dag]]`.
pub fn assemble_one_dilation_lme(blocks: &DilationBlocks) -> Result<CMat> {
    if spectral_norm(&blocks.c) > 1e-12 {
        return Err(DilationError::EtaNotZero(blocks.eta));
    }
    let d = blocks.a.nrows();
    let mut u = zeros(2 * d, 2 * d);
    place(&mut u, &blocks.b, 0, 0);
    place(&mut u, &blocks.a_tilde, 0, 1);
    place(&mut u, &blocks.a, 1, 0);
    place(&mut u, &dagger(&blocks.b).mapv(|z| -z), 1, 1);
    Ok(u)
}

/// One-ancilla dilation for the fully postselected case (`eta = 1`):
/// `[[C, Ã], [A, -C^dag]]`.
pub fn assemble_one_dilation_enhh(blocks: &DilationBlocks) -> Result<CMat> {
    if spectral_norm(&blocks.b) > 1e-12 {
        return Err(DilationError::EtaNotOne(blocks.eta));
    }
    let d = blocks.a.nrows();
    let mut u = zeros(2 * d, 2 * d);
    place(&mut u, &blocks.c, 0, 0);
    place(&mut u, &blocks.a_tilde, 0, 1);
    place(&mut u, &blocks.a, 1, 0);
    place(&mut u, &dagger(&blocks.c).mapv(|z| -z), 1, 1);
    Ok(u)
}

/// `|U^dag U - I|_spectral` — zero for a unitary.
pub fn verify_unitarity(u: &CMat) -> f64 {
    let n = u.nrows();
    spectral_norm(&(dagger(u).dot(u) - identity(n)))
}

/// Spectral deviation of the completeness sum `A^dag A + B^dag B + C^dag C`
/// from the identity.
pub fn completeness_error(blocks: &DilationBlocks) -> f64 {
    let d = blocks.a.nrows();
    let sum = dagger(&blocks.a).dot(&blocks.a)
        + dagger(&blocks.b).dot(&blocks.b)
        + dagger(&blocks.c).dot(&blocks.c);
    spectral_norm(&(sum - identity(d)))
}
