import init, {
  bias_report, hop_distances, operator_matrix, skeleton_edges, synth_walker,
} from "./pkg/heatgait_web.js";

const $ = (id) => document.getElementById(id);
const JOINTS = ["nose", "l_eye", "r_eye", "l_ear", "r_ear", "l_shoulder", "r_shoulder",
  "l_elbow", "r_elbow", "l_wrist", "r_wrist", "l_hip", "r_hip", "l_knee", "r_knee",
  "l_ankle", "r_ankle"];

function vertexCount(graph) {
  return graph === "coco" ? 17 : Number(graph.split(":")[1]);
}

function jointName(graph, i) {
  return graph === "coco" ? `${i} ${JOINTS[i]}` : `${i}`;
}

function fillCenters() {
  const graph = $("bias-graph").value;
  const sel = $("bias-center");
  const keep = sel.value;
  sel.innerHTML = "";
  for (let i = 0; i < vertexCount(graph); i++) {
    sel.add(new Option(jointName(graph, i), i));
  }
  if (keep && Number(keep) < vertexCount(graph)) sel.value = keep;
}

function renderBias() {
  const graph = $("bias-graph").value;
  const k = Number($("bias-k").value);
  const center = Number($("bias-center").value);
  $("bias-k-val").textContent = k;
  $("bias-err").textContent = "";
  const table = $("bias-table");
  try {
    const rows = JSON.parse(bias_report(graph, k)).filter((r) => r.center === center);
    const fmt = (x) => x.toExponential(3);
    table.innerHTML = "<tr><th>k</th><th>poly, 1 hop</th><th>poly, k hops</th><th>ratio</th>" +
      "<th>hop, 1 hop</th><th>hop, k hops</th></tr>" +
      rows.map((r) => `<tr><td>${r.scale}</td><td>${fmt(r.poly_mean_d1)}</td><td>${fmt(r.poly_mean_dk)}</td>` +
        `<td>${(r.poly_mean_d1 / r.poly_mean_dk).toFixed(2)}</td>` +
        `<td>${fmt(r.hop_mean_d1)}</td><td>${fmt(r.hop_mean_dk)}</td></tr>`).join("");
    if (rows.length === 0) $("bias-err").textContent = "No vertex at distance k from this centre.";
  } catch (e) {
    table.innerHTML = "";
    $("bias-err").textContent = String(e);
  }
}

function heatmap(canvas, values, n) {
  const ctx = canvas.getContext("2d");
  const cell = canvas.width / n;
  const max = Math.max(...values, 1e-12);
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  for (let i = 0; i < n; i++) {
    for (let j = 0; j < n; j++) {
      const v = Math.sqrt(values[i * n + j] / max);
      const shade = Math.round(255 * (1 - v));
      ctx.fillStyle = `rgb(${shade},${shade},255)`;
      ctx.fillRect(j * cell, i * cell, cell, cell);
    }
  }
}

function renderOperators() {
  const graph = $("op-graph").value;
  const k = Number($("op-k").value);
  $("op-k-val").textContent = k;
  const n = vertexCount(graph);
  const maxScale = Math.max(k, 1);
  heatmap($("op-poly"), operator_matrix(graph, "poly", k, maxScale), n);
  heatmap($("op-hop"), operator_matrix(graph, "hop", k, maxScale), n);
  const hops = hop_distances(graph);
  $("op-hop").title = `diameter ${Math.max(...hops)}`;
}

let frames = null;
let frameIndex = 0;

function regenerateWalker() {
  $("w-err").textContent = "";
  try {
    frames = synth_walker(
      Number($("w-subject").value), 7, 90, $("w-cond").value, Number($("w-angle").value),
      $("w-rev").checked, $("w-mir").checked, Number($("w-noise").value),
    );
  } catch (e) {
    frames = null;
    $("w-err").textContent = String(e);
  }
}

const EDGES = [];

function drawWalker() {
  const canvas = $("walker");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (frames) {
    const per = 17 * 3;
    const count = frames.length / per;
    const f = frameIndex % count;
    const at = (j) => [frames[f * per + j * 3], frames[f * per + j * 3 + 1], frames[f * per + j * 3 + 2]];
    ctx.lineWidth = 3;
    for (let e = 0; e < EDGES.length; e += 2) {
      const [ax, ay] = at(EDGES[e]);
      const [bx, by] = at(EDGES[e + 1]);
      ctx.strokeStyle = EDGES[e] % 2 === 1 || EDGES[e + 1] % 2 === 1 ? "#2a6fdb" : "#d2452c";
      ctx.beginPath();
      ctx.moveTo(ax, ay);
      ctx.lineTo(bx, by);
      ctx.stroke();
    }
    for (let j = 0; j < 17; j++) {
      const [x, y, c] = at(j);
      ctx.fillStyle = c < 0.6 ? "#bbb" : "#222";
      ctx.fillRect(x - 2, y - 2, 4, 4);
    }
    frameIndex++;
  }
  setTimeout(() => requestAnimationFrame(drawWalker), 40);
}

async function main() {
  await init();
  $("status").textContent = "";
  EDGES.push(...skeleton_edges("coco"));
  for (let a = 0; a <= 180; a += 18) $("w-angle").add(new Option(`${a}°`, a));
  $("w-angle").value = "90";
  fillCenters();
  $("bias-graph").addEventListener("change", () => { fillCenters(); renderBias(); });
  for (const id of ["bias-k", "bias-center"]) $(id).addEventListener("input", renderBias);
  for (const id of ["op-graph", "op-k"]) $(id).addEventListener("input", renderOperators);
  for (const id of ["w-subject", "w-cond", "w-angle", "w-rev", "w-mir", "w-noise"]) {
    $(id).addEventListener("input", regenerateWalker);
  }
  renderBias();
  renderOperators();
  regenerateWalker();
  drawWalker();
}

main().catch((e) => { $("status").textContent = `Failed to load: ${e}`; });
