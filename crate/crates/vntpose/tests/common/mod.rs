#![allow(dead_code)]

use std::path::Path;

use vntpose::config::RunConfig;

/// Small model and data that train in well under a second per epoch.
pub fn tiny_config(out: &Path) -> RunConfig {
    let text = r#"
seed = 11

[model]
channels = 4
wide_channels = 8
stn_hidden = [8]
frame_hidden = [8]
min_points = 16
[model.decoder]
patches = 2
hidden = 16
hidden_layers = 2
points = 64

[train]
epochs = 2
batch_size = 4
points = 64
lr = 0.01
lr_drops = []

[augment]
fps_range = [20, 40]
knn_count = 16

[data.synthetic]
family = "seated"
instances = 6
points = 64
dense_points = 128

[eval]
rotations = 4
"#;
    let mut cfg = RunConfig::from_toml(text, Path::new("tiny.toml")).unwrap();
    cfg.out = out.to_path_buf();
    cfg
}
