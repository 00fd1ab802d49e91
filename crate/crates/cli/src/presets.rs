//! Bundled experiment configs.

pub const PRESETS: &[(&str, &str)] = &[
    ("fig1-qdkr", include_str!("../presets/fig1-qdkr.conf")),
    ("fig1-duffing", include_str!("../presets/fig1-duffing.conf")),
    ("fig2", include_str!("../presets/fig2.conf")),
];

pub fn get(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}
