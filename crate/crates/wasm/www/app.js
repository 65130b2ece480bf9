import init, { Session, scheduleCurves, defaultConfig } from "./pkg/hierfl_wasm.js";

const $ = (id) => document.getElementById(id);
const palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

let session = null;
let history = [];
let timer = null;

function fail(e) {
  $("status").textContent = String(e && e.message ? e.message : e);
  stop();
}

function reset() {
  stop();
  $("status").textContent = "";
  history = [];
  try {
    session = new Session($("config").value);
  } catch (e) {
    session = null;
    fail(e);
  }
  draw();
}

function step() {
  if (!session || session.finished()) return false;
  try {
    const view = JSON.parse(session.step());
    history.push(view);
    draw();
    return !view.finished;
  } catch (e) {
    fail(e);
    return false;
  }
}

function stop() {
  if (timer) clearInterval(timer);
  timer = null;
  $("play").textContent = "Play";
}

function play() {
  if (timer) return stop();
  $("play").textContent = "Pause";
  timer = setInterval(() => { if (!step()) stop(); }, 120);
}

function axes(ctx, w, h, pad) {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#999";
  ctx.beginPath();
  ctx.moveTo(pad, 10);
  ctx.lineTo(pad, h - pad);
  ctx.lineTo(w - 10, h - pad);
  ctx.stroke();
}

function line(ctx, pts, color, dashed) {
  ctx.strokeStyle = color;
  ctx.setLineDash(dashed ? [5, 4] : []);
  ctx.beginPath();
  pts.forEach(([x, y], i) => (i ? ctx.lineTo(x, y) : ctx.moveTo(x, y)));
  ctx.stroke();
  ctx.setLineDash([]);
}

function drawAccuracy() {
  const c = $("acc"), ctx = c.getContext("2d");
  const pad = 30, w = c.width, h = c.height;
  axes(ctx, w, h, pad);
  if (!history.length) return;
  const n = Math.max(history.length, 2);
  const x = (i) => pad + (i / (n - 1)) * (w - pad - 20);
  const y = (v) => h - pad - v * (h - pad - 20);
  ctx.fillStyle = "#666";
  ctx.fillText("1.0", 4, y(1) + 4);
  ctx.fillText("0.0", 4, y(0) + 4);
  const series = (key) => history.filter((v) => v.round[key] != null).map((v, i) => [x(i), y(v.round[key])]);
  line(ctx, series("personal"), palette[0], false);
  line(ctx, series("global"), palette[0], true);
  line(ctx, series("fedavg_personal"), palette[1], false);
  line(ctx, series("fedavg_global"), palette[1], true);
}

function drawAgents(view) {
  const c = $("agents"), ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  if (!view) return;
  const ids = [...new Set(view.groups.map((g) => (g == null ? -1 : g)))].sort((a, b) => a - b);
  const colW = c.width / Math.max(ids.length, 1);
  const counts = {};
  view.groups.forEach((g, agent) => {
    const col = ids.indexOf(g == null ? -1 : g);
    const k = (counts[col] = (counts[col] || 0) + 1) - 1;
    ctx.fillStyle = palette[(view.planted[agent] ?? 0) % palette.length];
    ctx.beginPath();
    ctx.arc(col * colW + colW / 2, 20 + k * 18, 7, 0, 2 * Math.PI);
    ctx.fill();
  });
  ctx.fillStyle = "#444";
  ids.forEach((g, col) => ctx.fillText(g < 0 ? "none" : "g" + g, col * colW + colW / 2 - 10, c.height - 6));
}

function draw() {
  const view = history[history.length - 1];
  $("round").textContent = view
    ? `round ${view.round.round} (${view.round.stage}), groups ${JSON.stringify(view.round.groups)}, changes ${view.round.changes}`
    : "";
  $("dot").textContent = view && view.dot ? view.dot : "(no hierarchy yet)";
  drawAccuracy();
  drawAgents(view);
}

function drawSchedule() {
  let pts;
  try {
    pts = JSON.parse(scheduleCurves($("config").value, Number($("horizon").value)));
  } catch (e) {
    return fail(e);
  }
  const c = $("sched"), ctx = c.getContext("2d");
  const pad = 30, w = c.width, h = c.height;
  axes(ctx, w, h, pad);
  const n = Math.max(pts.length, 2);
  const x = (i) => pad + (i / (n - 1)) * (w - pad - 20);
  const y = (v) => h - pad - Math.min(v, 1.2) / 1.2 * (h - pad - 20);
  const shade = { warmup: "#eee", construction: "#ddd", adaptation: "#f7f7ff", "high-specialization": "#fff7f0" };
  pts.forEach((p, i) => {
    ctx.fillStyle = shade[p.stage] || "#fff";
    ctx.fillRect(x(i), 10, (w - pad - 20) / (n - 1), h - pad - 10);
  });
  ["alpha", "beta", "gamma", "resistance"].forEach((k, j) => line(ctx, pts.map((p, i) => [x(i), y(p[k])]), palette[j], false));
}

await init();
$("config").value = defaultConfig();
$("reset").onclick = reset;
$("step").onclick = step;
$("play").onclick = play;
$("curves").onclick = drawSchedule;
reset();
drawSchedule();
