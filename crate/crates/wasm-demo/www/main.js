import init, { simulate_and_fit, rank_scan, moments_curve } from "./pkg/plnfit_wasm.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function status(text, error = false) {
  $("status").textContent = text;
  $("status").className = error ? "error" : "";
}

function frame(canvas, xs, ys, opts = {}) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = 30;
  ctx.clearRect(0, 0, w, h);
  let [x0, x1] = opts.xr || [Math.min(...xs), Math.max(...xs)];
  let [y0, y1] = opts.yr || [Math.min(...ys), Math.max(...ys)];
  if (x1 === x0) { x0 -= 1; x1 += 1; }
  if (y1 === y0) { y0 -= 1; y1 += 1; }
  const sx = (x) => pad + ((x - x0) / (x1 - x0)) * (w - 2 * pad);
  const sy = (y) => h - pad - ((y - y0) / (y1 - y0)) * (h - 2 * pad);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  ctx.fillStyle = "#333";
  ctx.font = "11px sans-serif";
  if (opts.xlabel) ctx.fillText(opts.xlabel, pad, h - 8);
  if (opts.ylabel) ctx.fillText(opts.ylabel, 4, pad - 10);
  return { ctx, sx, sy };
}

function scatter(canvas, pts, xlabel, ylabel) {
  const xs = pts.map((p) => p[0]), ys = pts.map((p) => p[1]);
  const { ctx, sx, sy } = frame(canvas, xs, ys, { xlabel, ylabel });
  ctx.fillStyle = "rgba(30, 90, 160, 0.6)";
  for (const [x, y] of pts) {
    ctx.beginPath();
    ctx.arc(sx(x), sy(y), 2.5, 0, 2 * Math.PI);
    ctx.fill();
  }
}

function circle(canvas, pts, names, xlabel, ylabel) {
  const { ctx, sx, sy } = frame(canvas, [], [], { xr: [-1.1, 1.1], yr: [-1.1, 1.1], xlabel, ylabel });
  ctx.strokeStyle = "#bbb";
  ctx.beginPath();
  ctx.arc(sx(0), sy(0), sx(1) - sx(0), 0, 2 * Math.PI);
  ctx.stroke();
  ctx.strokeStyle = "#b33";
  ctx.fillStyle = "#b33";
  pts.forEach(([x, y], j) => {
    ctx.beginPath();
    ctx.moveTo(sx(0), sy(0));
    ctx.lineTo(sx(x), sy(y));
    ctx.stroke();
    ctx.fillText(names[j], sx(x) + 2, sy(y) - 2);
  });
}

function lines(canvas, xs, series, opts) {
  const all = series.flatMap((s) => s.values.filter((v) => v !== null));
  const { ctx, sx, sy } = frame(canvas, xs, all, opts);
  series.forEach((s, k) => {
    ctx.strokeStyle = s.color;
    ctx.beginPath();
    let started = false;
    s.values.forEach((v, i) => {
      if (v === null) return;
      if (started) ctx.lineTo(sx(xs[i]), sy(v)); else ctx.moveTo(sx(xs[i]), sy(v));
      started = true;
    });
    ctx.stroke();
    ctx.fillStyle = s.color;
    ctx.fillText(s.name, canvas.width - 110, 45 + 14 * k);
  });
  return { ctx, sx, sy };
}

function run(label, f) {
  status(label + "...");
  setTimeout(() => {
    try {
      const t0 = performance.now();
      f();
      status(`${label} done in ${((performance.now() - t0) / 1000).toFixed(2)} s`);
    } catch (e) {
      status(String(e), true);
    }
  }, 10);
}

function fit() {
  run("fitting", () => {
    const v = JSON.parse(simulate_and_fit(num("n"), num("p"), num("qtrue"), num("rank"),
      num("scale"), num("missing"), num("seed")));
    const [ax1, ax2] = [v.axis_labels[0] || "Axis 1", v.axis_labels[1] || "Axis 2"];
    scatter($("scores"), v.scores, ax1, ax2);
    circle($("circle"), v.correlations, v.variables, ax1, ax2);
    lines($("curve"), v.trace.map((_, i) => i), [{ name: "ELBO", color: "#264", values: v.trace }],
      { xlabel: "iteration", ylabel: "ELBO" });
    $("summary").textContent =
      `rank ${v.rank}: ELBO ${v.elbo.toFixed(2)}  BIC ${v.bic.toFixed(2)}  ICL ${v.icl.toFixed(2)}  ` +
      `R² ${v.r2 === null ? "n/a" : v.r2.toFixed(3)}\n` +
      `${v.iterations} iterations (${v.status}); relative Σ error vs truth ${v.sigma_rel_error.toFixed(3)}`;
  });
}

function scan() {
  run("scanning", () => {
    const v = JSON.parse(rank_scan(num("n"), num("p"), num("qtrue"), 6, num("scale"), num("seed")));
    lines($("curve"), v.ranks, [
      { name: "ELBO", color: "#264", values: v.elbo },
      { name: "BIC", color: "#226", values: v.bic },
      { name: "ICL", color: "#a22", values: v.icl },
    ], { xlabel: "rank", ylabel: "criterion" });
    $("summary").textContent = `best rank: ICL ${v.best_icl}, BIC ${v.best_bic}`;
  });
}

function moments() {
  const s2 = Number($("sigma2").value);
  $("sigma2v").textContent = s2.toFixed(2);
  const v = JSON.parse(moments_curve(s2, -1, 3, 81));
  lines($("moments"), v.mean, [
    { name: "PLN variance", color: "#a22", values: v.variance },
    { name: "Poisson (= mean)", color: "#226", values: v.poisson_variance },
  ], { xlabel: "marginal mean", ylabel: "variance" });
}

await init();
status("ready");
$("fit").disabled = false;
$("scan").disabled = false;
$("fit").onclick = fit;
$("scan").onclick = scan;
$("sigma2").oninput = moments;
moments();
