//! Pinhole projection and closed-form global root-position alignment.
//!
//! Units are millimetres in 3D and pixels in 2D. Nothing here converts
//! between them implicitly.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skeleton::{Pose2D, Pose3D};

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("joint {joint} has non-positive depth {depth} after translation")]
    DepthBehindCamera { joint: usize, depth: f64 },
    #[error("target 2D box has zero extent")]
    DegenerateTarget,
    #[error("source 3D pose has zero lateral extent")]
    DegenerateSource,
    #[error("invalid camera intrinsics: {0}")]
    InvalidCamera(String),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Pinhole intrinsics plus image size, all in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: f64, height: f64) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy, width, height };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width
            && self.cy > 0.0
            && self.cy < self.height
            && [self.fx, self.fy, self.cx, self.cy, self.width, self.height]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidCamera(format!("{self:?}")))
        }
    }
}

/// Translation of the pose root in camera coordinates (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RootPosition {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl RootPosition {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }
}

/// Width and height of a tight 2D bounding box (pixels).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxExtent {
    pub dx: f64,
    pub dy: f64,
}

impl BoxExtent {
    pub fn sum(&self) -> f64 {
        self.dx + self.dy
    }
}

pub fn project_pose(pose: &Pose3D, root: &RootPosition, cam: &CameraIntrinsics) -> Result<Pose2D> {
    let joints = pose
        .joints
        .iter()
        .enumerate()
        .map(|(joint, p)| {
            let depth = p.z + root.z;
            if !(depth > 0.0) {
                return Err(GeometryError::DepthBehindCamera { joint, depth });
            }
            Ok(Vector2::new(
                cam.fx * (p.x + root.x) / depth + cam.cx,
                cam.fy * (p.y + root.y) / depth + cam.cy,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Pose2D::new(joints))
}

/// Projection with every joint depth replaced by the root depth.
pub fn project_pose_approx(
    pose: &Pose3D,
    root: &RootPosition,
    cam: &CameraIntrinsics,
) -> Result<Pose2D> {
    if !(root.z > 0.0) {
        return Err(GeometryError::DepthBehindCamera { joint: usize::MAX, depth: root.z });
    }
    Ok(Pose2D::new(
        pose.joints
            .iter()
            .map(|p| {
                Vector2::new(
                    cam.fx * (p.x + root.x) / root.z + cam.cx,
                    cam.fy * (p.y + root.y) / root.z + cam.cy,
                )
            })
            .collect(),
    ))
}

pub fn box_extent(pose: &Pose2D) -> BoxExtent {
    let (mut lo, mut hi) = (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY));
    for j in &pose.joints {
        lo = lo.inf(j);
        hi = hi.sup(j);
    }
    if pose.joints.is_empty() {
        return BoxExtent { dx: 0.0, dy: 0.0 };
    }
    BoxExtent { dx: hi.x - lo.x, dy: hi.y - lo.y }
}

/// Lateral extents `(ΔX, ΔY)` of a 3D pose in mm.
pub fn lateral_extent(pose: &Pose3D) -> (f64, f64) {
    let (mut lo, mut hi) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
    for j in &pose.joints {
        lo = lo.inf(j);
        hi = hi.sup(j);
    }
    (hi.x - lo.x, hi.y - lo.y)
}

/// Closed-form root translation that places `source3d` so that, under the
/// approximate projection, its 2D box size and root location match `target2d`.
///
/// `root_index` selects the target joint used as 2D root; `source3d` must be
/// root-relative.
pub fn gpa_solve(
    target2d: &Pose2D,
    target_root_index: usize,
    source3d: &Pose3D,
    cam: &CameraIntrinsics,
) -> Result<RootPosition> {
    let target_sum = box_extent(target2d).sum();
    if !(target_sum > 0.0) {
        return Err(GeometryError::DegenerateTarget);
    }
    let (ex, ey) = lateral_extent(source3d);
    let source_sum = cam.fx * ex + cam.fy * ey;
    if !(source_sum > 0.0) {
        return Err(GeometryError::DegenerateSource);
    }
    let z = source_sum / target_sum;
    let root = target2d.joints[target_root_index];
    Ok(RootPosition { x: z * (root.x - cam.cx) / cam.fx, y: z * (root.y - cam.cy) / cam.fy, z })
}

/// Aspect-preserving screen normalization: both axes are divided by half the
/// image width, so the x range of on-screen points is `[-1, 1]`.
pub fn normalize_screen(pose: &Pose2D, cam: &CameraIntrinsics) -> Pose2D {
    let half_w = cam.width / 2.0;
    let half_h = cam.height / 2.0;
    Pose2D::new(
        pose.joints
            .iter()
            .map(|p| Vector2::new((p.x - half_w) / half_w, (p.y - half_h) / half_w))
            .collect(),
    )
}

/// Depth ratio `max |Z_i| / Z_r` that controls the approximation error.
pub fn depth_ratio(pose: &Pose3D, root: &RootPosition) -> f64 {
    pose.joints.iter().map(|j| j.z.abs()).fold(0.0, f64::max) / root.z
}

/// Relative box-size deviation `ζ/(1-ζ)` of the exact projection. Only a
/// bound when the constant-depth box contains the principal point; see
/// [`box_deviation_bound_off_axis`] for the general case.
pub fn box_deviation_bound(zeta: f64) -> f64 {
    if zeta < 1.0 {
        zeta / (1.0 - zeta)
    } else {
        f64::INFINITY
    }
}

/// Bound on the relative box-size deviation of the exact projection that
/// holds wherever the pose sits in the image. `approx` is the constant-depth
/// projection; per axis the box edges are measured from the principal point,
/// so for a box containing it this equals [`box_deviation_bound`].
pub fn box_deviation_bound_off_axis(approx: &Pose2D, cam: &CameraIntrinsics, zeta: f64) -> f64 {
    let (mut lo, mut hi) = (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY));
    for j in &approx.joints {
        lo = lo.inf(j);
        hi = hi.sup(j);
    }
    let c = Vector2::new(cam.cx, cam.cy);
    let reach = ((hi - c).abs() + (lo - c).abs()).sum();
    let size = (hi - lo).sum();
    if !(size > 0.0) {
        return f64::INFINITY;
    }
    box_deviation_bound(zeta) * reach / size
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 500.0, 500.0, 1000.0, 1000.0).unwrap()
    }

    fn single(x: f64, y: f64, z: f64) -> Pose3D {
        Pose3D::new(vec![Vector3::new(x, y, z)])
    }

    #[test]
    fn camera_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 2.0, 2.0).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 3.0, 1.0, 2.0, 2.0).is_err());
    }

    #[test]
    fn project_examples() {
        let root = RootPosition::new(0.0, 0.0, 4000.0);
        let p = project_pose(&single(0.0, 0.0, 0.0), &root, &cam()).unwrap();
        assert_eq!(p.joints[0], Vector2::new(500.0, 500.0));
        let p = project_pose(&single(100.0, -200.0, 0.0), &root, &cam()).unwrap();
        assert_eq!(p.joints[0], Vector2::new(525.0, 450.0));
        let p = project_pose(&single(-100.0, 200.0, 0.0), &root, &cam()).unwrap();
        assert_eq!(p.joints[0], Vector2::new(475.0, 550.0));
        assert!(matches!(
            project_pose(&single(0.0, 0.0, -4000.0), &root, &cam()),
            Err(GeometryError::DepthBehindCamera { joint: 0, .. })
        ));
    }

    #[test]
    fn approx_examples() {
        let root = RootPosition::new(0.0, 0.0, 4000.0);
        let c = cam();
        let zero = single(0.0, 0.0, 0.0);
        assert_eq!(
            project_pose_approx(&zero, &root, &c).unwrap(),
            project_pose(&zero, &root, &c).unwrap()
        );
        let p = single(0.0, 0.0, 400.0);
        assert_eq!(project_pose_approx(&p, &root, &c).unwrap().joints[0].x, 500.0);
        assert_eq!(project_pose(&p, &root, &c).unwrap().joints[0].x, 500.0);
        let p = single(100.0, 0.0, 400.0);
        assert_eq!(project_pose_approx(&p, &root, &c).unwrap().joints[0].x, 525.0);
        let exact = project_pose(&p, &root, &c).unwrap().joints[0].x;
        assert!((exact - (1000.0 * 100.0 / 4400.0 + 500.0)).abs() < 1e-12);
        assert!((exact - 522.727_272_727).abs() < 1e-6);
        assert!(project_pose_approx(&p, &RootPosition::new(0.0, 0.0, 0.0), &c).is_err());
    }

    #[test]
    fn box_examples() {
        let p = Pose2D::new(vec![Vector2::new(0.0, 0.0), Vector2::new(10.0, 5.0)]);
        assert_eq!(box_extent(&p), BoxExtent { dx: 10.0, dy: 5.0 });
        let p = Pose2D::new(vec![Vector2::new(3.0, 3.0); 4]);
        assert_eq!(box_extent(&p), BoxExtent { dx: 0.0, dy: 0.0 });
        let p = Pose2D::new(vec![
            Vector2::new(3.0, 1.0),
            Vector2::new(7.0, 9.0),
            Vector2::new(5.0, 4.0),
        ]);
        assert_eq!(box_extent(&p), BoxExtent { dx: 4.0, dy: 8.0 });
    }

    /// Source with ΔX = 800, ΔY = 1600 and root at the origin.
    fn worked_source() -> Pose3D {
        Pose3D::new(vec![
            Vector3::zeros(),
            Vector3::new(-400.0, -800.0, 0.0),
            Vector3::new(400.0, 800.0, 0.0),
        ])
    }

    fn target_box(root: Vector2<f64>) -> Pose2D {
        // box sum 600 px
        Pose2D::new(vec![root, root + Vector2::new(-100.0, -200.0), root + Vector2::new(100.0, 200.0)])
    }

    #[test]
    fn gpa_worked_examples() {
        let s = worked_source();
        let r = gpa_solve(&target_box(Vector2::new(500.0, 500.0)), 0, &s, &cam()).unwrap();
        assert_eq!(r, RootPosition::new(0.0, 0.0, 4000.0));
        let r = gpa_solve(&target_box(Vector2::new(750.0, 500.0)), 0, &s, &cam()).unwrap();
        assert_eq!(r.x, 1000.0);
        assert_eq!(r.z, 4000.0);
        let flat = Pose2D::new(vec![Vector2::new(3.0, 3.0); 3]);
        assert_eq!(gpa_solve(&flat, 0, &s, &cam()), Err(GeometryError::DegenerateTarget));
        let point = Pose3D::new(vec![Vector3::zeros(), Vector3::new(0.0, 0.0, 5.0)]);
        assert_eq!(
            gpa_solve(&target_box(Vector2::new(500.0, 500.0)), 0, &point, &cam()),
            Err(GeometryError::DegenerateSource)
        );
    }

    #[test]
    fn normalize_examples() {
        let c = cam();
        let p = Pose2D::new(vec![
            Vector2::new(500.0, 500.0),
            Vector2::new(0.0, 0.0),
            Vector2::new(750.0, 500.0),
        ]);
        let n = normalize_screen(&p, &c);
        assert_eq!(n.joints[0], Vector2::new(0.0, 0.0));
        assert_eq!(n.joints[1], Vector2::new(-1.0, -1.0));
        assert_eq!(n.joints[2], Vector2::new(0.5, 0.0));
    }

    #[test]
    fn bound_helpers() {
        assert_eq!(box_deviation_bound(0.25), 0.25 / 0.75);
        assert!(box_deviation_bound(1.0).is_infinite());
        let p = Pose3D::new(vec![Vector3::zeros(), Vector3::new(0.0, 0.0, -300.0)]);
        assert_eq!(depth_ratio(&p, &RootPosition::new(0.0, 0.0, 3000.0)), 0.1);
        let c = cam();
        let around = Pose2D::new(vec![Vector2::new(400.0, 450.0), Vector2::new(700.0, 550.0)]);
        assert!((box_deviation_bound_off_axis(&around, &c, 0.25) - box_deviation_bound(0.25)).abs() < 1e-12);
        // box entirely right of the principal point: x reach 500 + 200 over width 300
        let right = Pose2D::new(vec![Vector2::new(700.0, 450.0), Vector2::new(1000.0, 550.0)]);
        let expect = box_deviation_bound(0.25) * (700.0 + 100.0) / 400.0;
        assert!((box_deviation_bound_off_axis(&right, &c, 0.25) - expect).abs() < 1e-12);
    }

    /// A pose far off axis whose exact box deviates by more than `ζ/(1-ζ)`.
    #[test]
    fn centred_bound_can_fail_off_axis() {
        let c = cam();
        let pose = Pose3D::new(vec![Vector3::zeros(), Vector3::new(200.0, 0.0, 400.0), Vector3::new(0.0, 10.0, 0.0)]);
        let root = RootPosition::new(3000.0, 0.0, 4000.0);
        let approx = project_pose_approx(&pose, &root, &c).unwrap();
        let want = box_extent(&approx).sum();
        let dev = (box_extent(&project_pose(&pose, &root, &c).unwrap()).sum() - want).abs() / want;
        let zeta = depth_ratio(&pose, &root);
        assert!(dev > box_deviation_bound(zeta));
        assert!(dev <= box_deviation_bound_off_axis(&approx, &c, zeta));
    }
}
