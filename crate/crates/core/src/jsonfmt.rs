//! Serialization helpers with fixed float formatting.
//!
//! Every artifact this crate writes (graph files, model files, reports, CSV
//! tables) renders `f64` values in scientific notation with 17 significant
//! digits. 17 digits are sufficient to reconstruct the exact bit pattern of
//! any finite `f64`, so round trips are bit-exact and reruns with identical
//! inputs produce byte-identical files.

use std::io;

use serde::Serialize;
use serde_json::ser::{CompactFormatter, Formatter, Serializer};

use crate::Result;

/// Render a float with 17 significant digits, e.g. `5.0000000000000000e-1`.
pub fn fmt_f64(v: f64) -> String {
    format!("{:.16e}", v)
}

struct SigDigits17;

impl Formatter for SigDigits17 {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        write!(writer, "{:.16e}", value)
    }

    // Integers, strings and structure tokens keep the compact defaults.
    fn write_i64<W>(&mut self, writer: &mut W, value: i64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        CompactFormatter.write_i64(writer, value)
    }
}

/// Serialize to a compact JSON string with 17-significant-digit floats.
pub fn to_string<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = Serializer::with_formatter(&mut out, SigDigits17);
    value.serialize(&mut ser)?;
    // The formatter only emits UTF-8.
    Ok(String::from_utf8(out).expect("serializer produced invalid utf-8"))
}

/// Serialize to a writer with the same formatting as [`to_string`].
pub fn to_writer<T: Serialize, W: io::Write>(writer: W, value: &T) -> Result<()> {
    let mut ser = Serializer::with_formatter(writer, SigDigits17);
    value.serialize(&mut ser)?;
    Ok(())
}
