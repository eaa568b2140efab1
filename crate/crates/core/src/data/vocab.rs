//! Fixed token layout of the synthetic task.

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;

pub const DESCRIBE: u32 = 4;
pub const WHAT: u32 = 5;
pub const WHERE: u32 = 6;
pub const IS: u32 = 7;
pub const THE: u32 = 8;
pub const COLOR: u32 = 9;
pub const OF: u32 = 10;
pub const QUESTION: u32 = 11;
pub const IMAGE: u32 = 12;
pub const PLEASE: u32 = 13;

pub const FILLER_BASE: u32 = 14;
pub const N_FILLER: u32 = 18;

pub const N_COLORS: usize = 8;
pub const N_SHAPES: usize = 8;
pub const N_SLOTS: usize = 16;

pub const COLOR_BASE: u32 = 32;
pub const SHAPE_BASE: u32 = 40;
pub const POSITION_BASE: u32 = 48;

/// Smallest vocabulary that holds every id above.
pub const MIN_VOCAB: usize = POSITION_BASE as usize + N_SLOTS;

pub fn color_token(c: usize) -> u32 {
    COLOR_BASE + c as u32
}

pub fn shape_token(s: usize) -> u32 {
    SHAPE_BASE + s as u32
}

pub fn position_token(slot: usize) -> u32 {
    POSITION_BASE + slot as u32
}
