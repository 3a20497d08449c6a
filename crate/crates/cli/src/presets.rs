//! Built-in population presets reproducing the simulation figures. The same
//! files ship under `configs/` for editing.

pub const PRESETS: &[(&str, &str)] = &[
    ("fig-p3-r2", include_str!("../../../configs/fig-p3-r2.toml")),
    (
        "fig-p3-r4-equal",
        include_str!("../../../configs/fig-p3-r4-equal.toml"),
    ),
    ("fig-p2-r2", include_str!("../../../configs/fig-p2-r2.toml")),
    ("fig-p2-r4", include_str!("../../../configs/fig-p2-r4.toml")),
    (
        "fig-p2-r2-equal",
        include_str!("../../../configs/fig-p2-r2-equal.toml"),
    ),
    (
        "fig-zoom-p3",
        include_str!("../../../configs/fig-zoom-p3.toml"),
    ),
];

pub fn lookup(name: &str) -> Option<&'static str> {
    PRESETS
        .iter()
        .find(|(preset, _)| *preset == name)
        .map(|(_, text)| *text)
}

pub fn names() -> Vec<&'static str> {
    PRESETS.iter().map(|(name, _)| *name).collect()
}
