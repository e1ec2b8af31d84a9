import init, { loss_curves, bound_terms, power } from "./pkg/noisyfed_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function plot(canvas, series) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = 40;
  ctx.clearRect(0, 0, w, h);
  const all = series.flatMap((s) => s.values).filter(Number.isFinite).filter((v) => v > 0);
  if (!all.length) return;
  const lo = Math.log10(Math.min(...all));
  const hi = Math.log10(Math.max(...all));
  const span = hi - lo || 1;
  const n = Math.max(...series.map((s) => s.values.length));
  const x = (i) => pad + (i / Math.max(n - 1, 1)) * (w - 2 * pad);
  const y = (v) => h - pad - ((Math.log10(v) - lo) / span) * (h - 2 * pad);

  ctx.strokeStyle = "#999";
  ctx.fillStyle = "#555";
  ctx.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  ctx.fillText(`1e${hi.toFixed(1)}`, 2, pad + 4);
  ctx.fillText(`1e${lo.toFixed(1)}`, 2, h - pad);
  ctx.fillText("round", w / 2, h - 10);
  ctx.fillText(String(n - 1), w - pad - 10, h - pad + 14);

  for (const s of series) {
    ctx.strokeStyle = s.color;
    ctx.beginPath();
    s.values.forEach((v, i) => {
      if (!(v > 0) || !Number.isFinite(v)) return;
      i === 0 ? ctx.moveTo(x(i), y(v)) : ctx.lineTo(x(i), y(v));
    });
    ctx.stroke();
  }
}

function table(rows) {
  return "<table>" + rows.map((r) => "<tr>" + r.map((c) => `<td>${c}</td>`).join("") + "</tr>").join("") + "</table>";
}

const fmt = (v) => (Math.abs(v) >= 1e4 || (v !== 0 && Math.abs(v) < 1e-3) ? v.toExponential(4) : v.toFixed(4));

function runCurves() {
  try {
    const c = JSON.parse(loss_curves(num("lc-r"), num("lc-e"), num("lc-k"), num("lc-std"), num("lc-seed")));
    plot($("lc-plot"), [
      { values: c.noise_free, color: "#222" },
      { values: c.uplink_only, color: "#d62" },
      { values: c.downlink_only, color: "#27c" },
    ]);
    const last = (a) => fmt(a[a.length - 1]);
    $("lc-msg").className = "";
    $("lc-msg").textContent =
      `eta = ${c.learning_rate.toExponential(4)}; final loss: noise-free ${last(c.noise_free)}, ` +
      `uplink ${last(c.uplink_only)}, downlink ${last(c.downlink_only)}`;
  } catch (e) {
    $("lc-msg").className = "err";
    $("lc-msg").textContent = e.message ?? String(e);
  }
}

function runBounds() {
  try {
    const b = JSON.parse(
      bound_terms(num("b-n"), num("b-r"), num("b-e"), num("b-k"), num("b-up"), num("b-down"), num("b-s2"), num("b-f0"), num("b-d")),
    );
    $("b-out").innerHTML = table([
      ["leading", fmt(b.leading)],
      ["uplink", fmt(b.term_uplink)],
      ["SGD variance", fmt(b.term_sgd_variance)],
      ["downlink", fmt(b.term_downlink)],
      ["total", fmt(b.total)],
      ["&zeta;", fmt(b.zeta)],
    ]);
  } catch (e) {
    $("b-out").innerHTML = `<span class="err">${e.message ?? e}</span>`;
  }
}

function runPower() {
  try {
    const p = JSON.parse(power(num("p-k"), num("p-e")));
    $("p-out").innerHTML = table([
      ["", "ours", "prior", "ratio"],
      ["uplink", fmt(p.ours_uplink), fmt(p.prior_uplink), fmt(p.uplink_ratio)],
      ["downlink", fmt(p.ours_downlink), fmt(p.prior_downlink), fmt(p.downlink_ratio)],
      ["total", "", "", fmt(p.total_ratio)],
    ]);
  } catch (e) {
    $("p-out").innerHTML = `<span class="err">${e.message ?? e}</span>`;
  }
}

await init();
$("lc-go").addEventListener("click", runCurves);
for (const id of ["b-n", "b-r", "b-e", "b-k", "b-up", "b-down", "b-s2", "b-f0", "b-d"]) $(id).addEventListener("input", runBounds);
for (const id of ["p-k", "p-e"]) $(id).addEventListener("input", runPower);
runCurves();
runBounds();
runPower();
