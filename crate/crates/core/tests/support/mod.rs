//! Checks shared by the crate's tests and the CLI acceptance run.
#![allow(dead_code)]

/// `assert_eq!` that returns the failure instead of panicking.
macro_rules! ensure_eq {
    ($a:expr, $b:expr, $($fmt:tt)+) => {
        if $a != $b {
            return Err(format!("{}: {:?} != {:?}", format!($($fmt)+), $a, $b));
        }
    };
}

pub mod gradcheck;
pub mod oracle;
pub mod tables;
