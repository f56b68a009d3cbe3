//! Shipped experiment configs. Each is an ordinary config file.

pub const PRESETS: &[(&str, &str)] = &[
    ("central-vs-fed", include_str!("../presets/central-vs-fed.toml")),
    ("sota-compare", include_str!("../presets/sota-compare.toml")),
    ("client-ablation", include_str!("../presets/client-ablation.toml")),
    ("rank-ablation", include_str!("../presets/rank-ablation.toml")),
    ("agg-compare", include_str!("../presets/agg-compare.toml")),
    ("scale-noniid", include_str!("../presets/scale-noniid.toml")),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|p| p.0)
}

pub fn get(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|p| p.0 == name).map(|p| p.1)
}
