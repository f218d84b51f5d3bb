#![allow(dead_code)]

pub mod ap;
