// SPDX-License-Identifier: MIT OR Apache-2.0

//! Software low-precision formats and the rounding rules every other module
//! computes with.

mod bf16;
mod f8;
mod grid;
mod precision;
mod rtn;
mod scalar;

pub use bf16::{round_bf16, Bf16, BF16_MAX};
pub use f8::{
    add_f8, decode_f8, encode_f8, round_f8, F8E4M3, F8_MAX, F8_MIN_NORMAL, F8_MIN_SUBNORMAL,
};
pub use precision::{round_scalar, round_slice, step_size, Precision};
pub use rtn::{quantize_rtn, QuantParams, SUPPORTED_BITS};
pub use scalar::{bitwise_eq, Scalar};
