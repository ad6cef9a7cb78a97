use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use super::SceneError;

/// Pinhole camera. Camera space follows the x-right, y-down, z-forward
/// convention; pixel `(u, v)` has its center at `(u + 0.5, v + 0.5)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    world_to_camera: Matrix4<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

/// On-disk camera description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraFile {
    /// Row-major 4×4 world-to-camera transform.
    pub world_to_camera: [f64; 16],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(
        world_to_camera: Matrix4<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, SceneError> {
        if width == 0 || height == 0 {
            return Err(SceneError::InvalidCamera(format!("image size {width}x{height}")));
        }
        if !(fx > 0.0 && fy > 0.0) {
            return Err(SceneError::InvalidCamera(format!("focal lengths fx={fx} fy={fy}")));
        }
        let r: Matrix3<f64> = world_to_camera.fixed_view::<3, 3>(0, 0).into();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if err > 1e-6 || r.determinant() < 0.0 {
            return Err(SceneError::InvalidCamera(format!(
                "rotation block not orthonormal (deviation {err:e})"
            )));
        }
        Ok(Camera { world_to_camera, fx, fy, cx, cy, width, height })
    }

    /// Camera at `eye` looking at `target`; `up` picks the roll. The principal
    /// point is the image center.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, SceneError> {
        let eye = Vector3::from(eye);
        let forward = (Vector3::from(target) - eye).normalize();
        let right = forward.cross(&Vector3::from(up));
        if right.norm() < 1e-12 {
            return Err(SceneError::InvalidCamera("up vector parallel to view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        let mut w = Matrix4::identity();
        w.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        w.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        Camera::new(w, focal, focal, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn world_to_camera(&self) -> &Matrix4<f64> {
        &self.world_to_camera
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * world + self.translation()
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Same pose and field of view at a different resolution.
    pub fn resized(&self, width: u32, height: u32) -> Camera {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera {
            world_to_camera: self.world_to_camera,
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }

    pub fn to_file(&self) -> CameraFile {
        let mut m = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                m[r * 4 + c] = self.world_to_camera[(r, c)];
            }
        }
        CameraFile {
            world_to_camera: m,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
        }
    }

    pub fn from_file(f: &CameraFile) -> Result<Self, SceneError> {
        let w = Matrix4::from_row_slice(&f.world_to_camera);
        Camera::new(w, f.fx, f.fy, f.cx, f.cy, f.width, f.height)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(CameraFile),
    Many(Vec<CameraFile>),
}

/// Parses a camera file holding either one camera object or an array.
pub fn load_cameras(text: &str) -> Result<Vec<Camera>, SceneError> {
    let parsed: OneOrMany = serde_json::from_str(text)?;
    let files = match parsed {
        OneOrMany::One(f) => vec![f],
        OneOrMany::Many(v) => v,
    };
    files.iter().map(Camera::from_file).collect()
}

pub fn save_cameras(path: &Path, cameras: &[Camera]) -> Result<(), SceneError> {
    let files: Vec<CameraFile> = cameras.iter().map(Camera::to_file).collect();
    let text = serde_json::to_string_pretty(&files)?;
    std::fs::write(path, text)?;
    Ok(())
}
