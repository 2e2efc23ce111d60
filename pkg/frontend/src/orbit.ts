/** Orbit-camera parameterisation and its wire pose.
 *
 * The camera circles a target point: `eye = target + radius * (cos(el)sin(az),
 * sin(el), cos(el)cos(az))` with angles in degrees, so azimuth 0 puts the
 * camera on the +Z axis looking toward -Z and azimuth grows counter-clockwise
 * seen from above. The pose crosses the wire as a unit world-from-camera
 * quaternion in (w, x, y, z) order plus the camera position.
 */

export interface OrbitParams {
  azimuth: number;
  elevation: number;
  radius: number;
  target: [number, number, number];
}

export interface WirePose {
  quaternion: [number, number, number, number];
  translation: [number, number, number];
  fovY: number;
  width: number;
  height: number;
}

/** Strictest allowed elevation; the frame degenerates at exactly +-90. */
export const ELEVATION_LIMIT = 89.9;

type Vec3 = [number, number, number];

const deg = Math.PI / 180;

function sub(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

function cross(a: Vec3, b: Vec3): Vec3 {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

function norm(a: Vec3): number {
  return Math.hypot(a[0], a[1], a[2]);
}

function normalize(a: Vec3): Vec3 {
  const n = norm(a);
  if (n === 0) throw new Error("orbit: zero-length vector");
  return [a[0] / n, a[1] / n, a[2] / n];
}

/** Clamp elevation into the well-conditioned range. */
export function clampElevation(elevation: number): number {
  return Math.min(ELEVATION_LIMIT, Math.max(-ELEVATION_LIMIT, elevation));
}

export function orbitEye(params: OrbitParams): Vec3 {
  const az = params.azimuth * deg;
  const el = clampElevation(params.elevation) * deg;
  const r = params.radius;
  return [
    params.target[0] + r * Math.cos(el) * Math.sin(az),
    params.target[1] + r * Math.sin(el),
    params.target[2] + r * Math.cos(el) * Math.cos(az),
  ];
}

/** Column-major 3x3 rotation -> unit quaternion (w, x, y, z). */
function quaternionFromColumns(right: Vec3, up: Vec3, back: Vec3): [number, number, number, number] {
  // rows of R: R[i][j] with columns [right | up | back]
  const m = [
    [right[0], up[0], back[0]],
    [right[1], up[1], back[1]],
    [right[2], up[2], back[2]],
  ] as const;
  const trace = m[0][0] + m[1][1] + m[2][2];
  let w: number, x: number, y: number, z: number;
  if (trace > 0) {
    const s = Math.sqrt(trace + 1) * 2;
    w = s / 4;
    x = (m[2][1] - m[1][2]) / s;
    y = (m[0][2] - m[2][0]) / s;
    z = (m[1][0] - m[0][1]) / s;
  } else if (m[0][0] > m[1][1] && m[0][0] > m[2][2]) {
    const s = Math.sqrt(1 + m[0][0] - m[1][1] - m[2][2]) * 2;
    w = (m[2][1] - m[1][2]) / s;
    x = s / 4;
    y = (m[0][1] + m[1][0]) / s;
    z = (m[0][2] + m[2][0]) / s;
  } else if (m[1][1] > m[2][2]) {
    const s = Math.sqrt(1 + m[1][1] - m[0][0] - m[2][2]) * 2;
    w = (m[0][2] - m[2][0]) / s;
    x = (m[0][1] + m[1][0]) / s;
    y = s / 4;
    z = (m[1][2] + m[2][1]) / s;
  } else {
    const s = Math.sqrt(1 + m[2][2] - m[0][0] - m[1][1]) * 2;
    w = (m[1][0] - m[0][1]) / s;
    x = (m[0][2] + m[2][0]) / s;
    y = (m[1][2] + m[2][1]) / s;
    z = s / 4;
  }
  const n = Math.hypot(w, x, y, z);
  // canonical sign: non-negative w keeps equal poses byte-identical
  const sign = w < 0 ? -1 : 1;
  return [(sign * w) / n, (sign * x) / n, (sign * y) / n, (sign * z) / n];
}

/** Build the wire pose looking at the orbit target. */
export function orbitToPose(
  params: OrbitParams,
  fovY: number,
  width: number,
  height: number,
): WirePose {
  if (!(params.radius > 0)) {
    throw new Error(`orbit: radius must be positive, got ${params.radius}`);
  }
  if (!(fovY > 0 && fovY < 180)) {
    throw new Error(`orbit: fovY must be in (0, 180), got ${fovY}`);
  }
  const eye = orbitEye(params);
  const forward = normalize(sub(params.target, eye));
  let rightRaw = cross(forward, [0, 1, 0]);
  if (norm(rightRaw) < 1e-6) {
    rightRaw = cross(forward, [1, 0, 0]);
  }
  const right = normalize(rightRaw);
  const trueUp = cross(right, forward);
  const back: Vec3 = [-forward[0], -forward[1], -forward[2]];
  return {
    quaternion: quaternionFromColumns(right, trueUp, back),
    translation: eye,
    fovY,
    width,
    height,
  };
}

/** Camera-frame axes recovered from a wire quaternion (for overlay math). */
export function poseAxes(pose: WirePose): { right: Vec3; up: Vec3; forward: Vec3 } {
  const [w, x, y, z] = pose.quaternion;
  const col = (j: number): Vec3 => {
    // rotation matrix columns from the unit quaternion
    const r: Vec3[] = [
      [1 - 2 * (y * y + z * z), 2 * (x * y + w * z), 2 * (x * z - w * y)],
      [2 * (x * y - w * z), 1 - 2 * (x * x + z * z), 2 * (y * z + w * x)],
      [2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)],
    ];
    const c = r[j];
    if (!c) throw new Error("orbit: bad column index");
    return c;
  };
  const back = col(2);
  return { right: col(0), up: col(1), forward: [-back[0], -back[1], -back[2]] };
}
