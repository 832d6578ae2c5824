//! Shared fixtures for the benchmarks.

use pmstereo_core::harness::bundled_scene;
use pmstereo_core::{RenderedView, Scene, View};

/// Renders a bundled scene.
pub fn rendered(name: &str) -> Vec<RenderedView> {
    let text = bundled_scene(name).unwrap_or_else(|| panic!("no bundled scene {name}"));
    Scene::from_toml(text)
        .and_then(|s| s.render_checked())
        .unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Pipeline input with view 0 as the reference.
pub fn views(name: &str) -> Vec<View> {
    rendered(name).iter().map(RenderedView::view).collect()
}
