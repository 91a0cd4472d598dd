#![allow(dead_code)]

pub mod oracles;
pub mod toy;
pub mod transcription;
