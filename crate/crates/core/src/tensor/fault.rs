//! Process-wide fault injection used by the CLI mutation tests.
//!
//! A fault is only ever armed by the hidden `--inject-fault` flag of the
//! `pom` binary. Library tests never arm one.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Fault {
    None = 0,
    /// Negates the gated state inside the selection step.
    SelectSign = 1,
    /// Drops the `(1 - s)` factor from the sigmoid derivative.
    SigmoidBackward = 2,
}

static ARMED: AtomicU8 = AtomicU8::new(Fault::None as u8);

#[doc(hidden)]
pub fn arm(fault: Fault) {
    ARMED.store(fault as u8, Ordering::Relaxed);
}

#[inline]
pub(crate) fn active(fault: Fault) -> bool {
    ARMED.load(Ordering::Relaxed) == fault as u8
}
