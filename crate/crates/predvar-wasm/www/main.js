import init, { analytic_field, star_field, scaling_curve } from "../pkg/predvar_wasm.js";

const CELL = 6;

function heat(canvas, values, n, label) {
  canvas.width = n * CELL;
  canvas.height = n * CELL;
  const ctx = canvas.getContext("2d");
  let lo = Infinity, hi = -Infinity;
  for (const v of values) { if (v < lo) lo = v; if (v > hi) hi = v; }
  const span = hi - lo || 1;
  for (let i = 0; i < n; i++) {
    for (let j = 0; j < n; j++) {
      const t = (values[i * n + j] - lo) / span;
      // dark blue -> yellow
      const r = Math.round(255 * Math.min(1, 1.5 * t));
      const g = Math.round(255 * Math.pow(t, 0.8));
      const b = Math.round(80 + 120 * (1 - t));
      ctx.fillStyle = `rgb(${r},${g},${b})`;
      ctx.fillRect(j * CELL, (n - 1 - i) * CELL, CELL, CELL);
    }
  }
  canvas.title = `${label}: min ${lo.toExponential(2)}, max ${hi.toExponential(2)}`;
}

function panel(parent, label) {
  const holder = document.createElement("div");
  holder.className = "panel";
  const canvas = document.createElement("canvas");
  const caption = document.createElement("div");
  caption.textContent = label;
  holder.appendChild(canvas);
  holder.appendChild(caption);
  parent.appendChild(holder);
  return canvas;
}

function val(id) { return Number(document.getElementById(id).value); }
const status = (msg) => { document.getElementById("status").textContent = msg; };

async function runStar() {
  status("computing ensembles…");
  await new Promise(requestAnimationFrame);
  const parent = document.getElementById("star-panels");
  parent.replaceChildren();
  const n = val("grid");
  const extent = 4 * val("radius");
  for (const variant of ["lin", "lin_a", "lin_c", "lin_i"]) {
    const t0 = performance.now();
    const field = star_field(val("arms"), val("radius"), val("width"), val("ensemble"), n, extent, BigInt(val("seed")), variant);
    const canvas = panel(parent, `${variant} (${((performance.now() - t0) / 1000).toFixed(1)} s)`);
    heat(canvas, field, n, variant);
    await new Promise(requestAnimationFrame);
  }
  status("");
}

function runAnalytic() {
  const parent = document.getElementById("analytic-panels");
  parent.replaceChildren();
  const n = val("a-grid");
  const extent = 2.5 * val("a-radius");
  const fields = analytic_field(val("a-radius"), val("a-width"), n, extent);
  const sq = n * n;
  heat(panel(parent, "v_a (distance)"), fields.slice(0, sq), n, "v_a");
  heat(panel(parent, "v_c (angle)"), fields.slice(sq, 2 * sq), n, "v_c");
  heat(panel(parent, "v_i (interplay)"), fields.slice(2 * sq, 3 * sq), n, "v_i");
}

function plotScaling(curve) {
  const c = document.getElementById("scaling-plot");
  const ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  const series = [
    ["v_c", "#d62728", (p) => p.v_c],
    ["v_i", "#2ca02c", (p) => p.v_i],
    ["v_a", "#1f77b4", (p) => p.v_a],
  ];
  const xs = curve.points.map((p) => Math.log2(p.width));
  let ymin = Infinity, ymax = -Infinity;
  for (const [, , sel] of series) {
    for (const p of curve.points) {
      const v = Math.log10(sel(p));
      if (v < ymin) ymin = v; if (v > ymax) ymax = v;
    }
  }
  const pad = 40;
  const sx = (x) => pad + (x - xs[0]) / (xs[xs.length - 1] - xs[0]) * (c.width - 2 * pad);
  const sy = (y) => c.height - pad - (y - ymin) / (ymax - ymin || 1) * (c.height - 2 * pad);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, c.width - 2 * pad, c.height - 2 * pad);
  ctx.fillStyle = "#555";
  ctx.fillText("log2 width", c.width / 2 - 20, c.height - 12);
  ctx.save();
  ctx.translate(12, c.height / 2 + 30);
  ctx.rotate(-Math.PI / 2);
  ctx.fillText("log10 variance", 0, 0);
  ctx.restore();
  series.forEach(([name, color, sel], k) => {
    ctx.strokeStyle = color;
    ctx.fillStyle = color;
    ctx.beginPath();
    curve.points.forEach((p, i) => {
      const x = sx(Math.log2(p.width));
      const y = sy(Math.log10(sel(p)));
      if (i === 0) ctx.moveTo(x, y); else ctx.lineTo(x, y);
      ctx.fillRect(x - 2, y - 2, 4, 4);
    });
    ctx.stroke();
    ctx.fillText(name, c.width - pad + 4, sy(Math.log10(sel(curve.points[curve.points.length - 1]))));
    void k;
  });
}

async function runScaling() {
  status("sweeping widths…");
  await new Promise(requestAnimationFrame);
  const json = scaling_curve(8, 1.0, val("s-ensemble"), 0n, val("s-min"), val("s-max"));
  const curve = JSON.parse(json);
  plotScaling(curve);
  document.getElementById("scaling-json").textContent =
    `slope v_c ${curve.slope_v_c.toFixed(3)}\nslope v_i ${curve.slope_v_i.toFixed(3)}\nslope v_a ${curve.slope_v_a.toFixed(3)}`;
  status("");
}

await init();
document.getElementById("run-star").addEventListener("click", () => runStar().catch((e) => status(String(e))));
document.getElementById("run-analytic").addEventListener("click", () => { try { runAnalytic(); } catch (e) { status(String(e)); } });
document.getElementById("run-scaling").addEventListener("click", () => runScaling().catch((e) => status(String(e))));
runAnalytic();
