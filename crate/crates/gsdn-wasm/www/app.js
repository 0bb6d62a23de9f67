import init, { sceneView, anchorsAt, nmsMerge } from "./pkg/gsdn_wasm.js";

const $ = (id) => document.getElementById(id);
const num = (id) => parseFloat($(id).value);
const CLASS_COLORS = ["#d1495b", "#00798c", "#edae49", "#66a182", "#8d6a9f"];

function call(fn, ...args) {
  const r = JSON.parse(fn(...args));
  if (r.error) {
    $("status").textContent = r.error;
    return null;
  }
  $("status").textContent = "";
  return r.ok;
}

// Maps world x-y (meters) to a canvas with y pointing up.
function view(canvas, x0, y0, size) {
  const s = canvas.width / size;
  return {
    s,
    px: (x) => (x - x0) * s,
    py: (y) => canvas.height - (y - y0) * s,
    wx: (px) => px / s + x0,
    wy: (py) => (canvas.height - py) / s + y0,
  };
}

function strokeBox(ctx, v, b, color, width, dash = []) {
  const [cx, cy] = b.center, [sx, sy] = b.size;
  ctx.strokeStyle = color;
  ctx.lineWidth = width;
  ctx.setLineDash(dash);
  ctx.strokeRect(v.px(cx - sx / 2), v.py(cy + sy / 2), sx * v.s, sy * v.s);
  ctx.setLineDash([]);
}

// ---- voxelize and expand ----

let scene = null;

function runScene() {
  const levels = Math.round(num("s-levels"));
  scene = call(sceneView, Math.round(num("s-seed")), num("s-voxel"), levels, num("s-scale"), 6000);
  if (!scene) return;
  const slider = $("s-level");
  slider.max = levels;
  slider.value = Math.min(slider.value, levels);
  drawScene();
  const rows = scene.levels
    .map((l) => `<tr><td>${l.level}</td><td>${l.stride}</td><td>${l.encoder_nnz}</td><td>${l.potential_nnz}</td><td>${l.target_nnz}</td><td>${l.positive_anchors}</td></tr>`)
    .join("");
  $("s-table").innerHTML =
    `<tr><th>level</th><th>stride</th><th>encoder</th><th>expanded</th><th>targets</th><th>positive anchors</th></tr>${rows}` +
    `<tr><td colspan="6">${scene.input_nnz} input voxels, ${scene.boxes.length} objects</td></tr>`;
}

function drawScene() {
  if (!scene) return;
  const canvas = $("s-canvas"), ctx = canvas.getContext("2d");
  const lvl = scene.levels[$("s-level").value - 1];
  $("s-level-n").textContent = lvl.level;
  const pad = 0.3, extent = Math.max(scene.room[0], scene.room[1]) + 2 * pad;
  const v = view(canvas, -pad, -pad, extent);
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const cell = scene.voxel_size * lvl.stride;
  for (const [x, y, f] of lvl.cells) {
    const wx = x * scene.voxel_size, wy = y * scene.voxel_size;
    const rx = v.px(wx), ry = v.py(wy + cell), w = cell * v.s;
    if (f & 1 && $("s-enc").checked) {
      ctx.fillStyle = "rgba(74,126,187,0.45)";
      ctx.fillRect(rx, ry, w, w);
    } else if (f & 2 && !(f & 1) && $("s-gen").checked) {
      ctx.fillStyle = "rgba(240,180,41,0.45)";
      ctx.fillRect(rx, ry, w, w);
    }
    if (f & 4 && $("s-tgt").checked) {
      ctx.strokeStyle = "#2a9d3a";
      ctx.lineWidth = 1.5;
      ctx.strokeRect(rx + 1, ry + 1, w - 2, w - 2);
    }
  }
  if ($("s-points").checked) {
    for (const [x, y, , r, g, b] of scene.points) {
      ctx.fillStyle = `rgb(${r},${g},${b})`;
      ctx.fillRect(v.px(x) - 1, v.py(y) - 1, 2, 2);
    }
  }
  if ($("s-boxes").checked) {
    for (const b of scene.boxes) strokeBox(ctx, v, b, CLASS_COLORS[b.class_id % CLASS_COLORS.length], 2);
  }
}

// ---- anchors and IoU ----

const anchorState = { q: [1.0, 1.0], c: [1.1, 1.05] };

function runAnchors() {
  const size = $("a-size").value.split(",").map(Number);
  const gt = { class_id: 0, center: [anchorState.c[0], anchorState.c[1], num("a-cz")], size };
  const r = call(anchorsAt, anchorState.q[0], anchorState.q[1], num("a-z"), Math.round(num("a-level")), num("a-voxel"), num("a-scale"), JSON.stringify(gt));
  const canvas = $("a-canvas"), ctx = canvas.getContext("2d");
  const v = view(canvas, 0, 0, 2.5);
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (!r) return;
  const style = { Positive: ["#2a9d3a", 2, []], Ignore: ["#999", 1, []], Negative: ["#d1495b", 1, [4, 3]] };
  for (const a of r.anchors) strokeBox(ctx, v, a.anchor, ...style[a.label]);
  strokeBox(ctx, v, gt, "#000", 2.5);
  const vs = num("a-voxel") * r.stride;
  ctx.fillStyle = "rgba(74,126,187,0.3)";
  ctx.fillRect(v.px(r.voxel[0] * num("a-voxel")), v.py(r.voxel[1] * num("a-voxel") + vs), vs * v.s, vs * v.s);
  ctx.fillStyle = "#000";
  ctx.beginPath();
  ctx.arc(v.px(anchorState.q[0]), v.py(anchorState.q[1]), 3, 0, 2 * Math.PI);
  ctx.fill();
  const rows = r.anchors
    .map((a, i) => `<tr><td>${i}</td><td>${a.anchor.size.map((s) => s.toFixed(2)).join(" × ")}</td><td>${a.iou.toFixed(3)}</td><td>${a.label}</td></tr>`)
    .join("");
  $("a-table").innerHTML =
    `<tr><td colspan="4">voxel (${r.voxel.join(", ")}), stride ${r.stride}</td></tr>` +
    `<tr><th>#</th><th>size (m)</th><th>IoU</th><th>label</th></tr>${rows}`;
}

function anchorClick(e) {
  e.preventDefault();
  const canvas = $("a-canvas"), v = view(canvas, 0, 0, 2.5);
  const p = [v.wx(e.offsetX), v.wy(e.offsetY)];
  if (e.button === 2 || e.shiftKey) anchorState.c = p;
  else anchorState.q = p;
  runAnchors();
}

// ---- merge ----

let raw = [];

function gauss() {
  return Math.sqrt(-2 * Math.log(1 - Math.random())) * Math.cos(2 * Math.PI * Math.random());
}

function runMerge() {
  const iou = num("n-iou"), score = num("n-score");
  $("n-iou-v").textContent = iou.toFixed(2);
  $("n-score-v").textContent = score.toFixed(2);
  const merged = call(nmsMerge, JSON.stringify({ boxes: raw, iou, score_thresh: score }));
  const canvas = $("n-canvas"), ctx = canvas.getContext("2d");
  const v = view(canvas, 0, 0, 4);
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  for (const b of raw) {
    ctx.globalAlpha = 0.25 + 0.6 * b.score;
    strokeBox(ctx, v, b, CLASS_COLORS[b.class_id], 1);
  }
  ctx.globalAlpha = 1;
  if (!merged) return;
  for (const b of merged) strokeBox(ctx, v, b, CLASS_COLORS[b.class_id], 3);
  $("n-stats").textContent = `${raw.length} raw boxes, ${merged.length} after merging`;
}

function mergeClick(e) {
  const canvas = $("n-canvas"), v = view(canvas, 0, 0, 4);
  const cx = v.wx(e.offsetX), cy = v.wy(e.offsetY);
  const w = 0.3 + 0.5 * Math.random(), d = 0.3 + 0.5 * Math.random();
  const cls = Number($("n-class").value);
  for (let i = 0; i < 8; i++) {
    raw.push({
      class_id: cls,
      center: [cx + 0.08 * gauss(), cy + 0.08 * gauss(), 0.5],
      size: [w * Math.exp(0.15 * gauss()), d * Math.exp(0.15 * gauss()), 1.0],
      score: Math.random(),
    });
  }
  runMerge();
}

async function main() {
  await init();
  $("status").textContent = "";
  $("s-run").onclick = runScene;
  $("s-level").oninput = drawScene;
  for (const id of ["s-points", "s-enc", "s-gen", "s-tgt", "s-boxes"]) $(id).onchange = drawScene;
  for (const id of ["a-level", "a-voxel", "a-scale", "a-size", "a-cz", "a-z"]) $(id).onchange = runAnchors;
  $("a-canvas").onmousedown = anchorClick;
  $("a-canvas").oncontextmenu = (e) => e.preventDefault();
  $("n-canvas").onclick = mergeClick;
  $("n-iou").oninput = runMerge;
  $("n-score").oninput = runMerge;
  $("n-clear").onclick = () => { raw = []; runMerge(); };
  runScene();
  runAnchors();
  runMerge();
}

main().catch((e) => { $("status").textContent = String(e); });
