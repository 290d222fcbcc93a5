const SYMBOLS: [&str; 36] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr",
];

/// Element symbol for an atomic number; unknown numbers map to `X<Z>`.
pub fn element_symbol(z: u32) -> String {
    match z {
        1..=36 => SYMBOLS[z as usize - 1].to_string(),
        _ => format!("X{z}"),
    }
}

pub fn atomic_number(symbol: &str) -> Option<u32> {
    if let Some(i) = SYMBOLS.iter().position(|s| s.eq_ignore_ascii_case(symbol)) {
        return Some(i as u32 + 1);
    }
    symbol.strip_prefix('X').and_then(|rest| rest.parse().ok())
}
