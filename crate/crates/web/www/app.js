// Generated by `wasm-bindgen --target web` into ./pkg (see the README).
import init, { render_phantom, modulate_phantom, plan_batches } from "./pkg/pmm_synth_web.js";

const PHANTOM_SIZE = 64;
const MOD_SIZE = 64;
const MOD_SEED = 11;
const MOD_MODALITY = "T2";

function draw(canvas, pixels, size) {
  const scratch = document.createElement("canvas");
  scratch.width = size;
  scratch.height = size;
  const ctx = scratch.getContext("2d");
  const img = ctx.createImageData(size, size);
  for (let i = 0; i < size * size; i++) {
    const v = Math.max(0, Math.min(255, Math.round(pixels[i] * 255)));
    img.data.set([v, v, v, 255], i * 4);
  }
  ctx.putImageData(img, 0, 0);
  const out = canvas.getContext("2d");
  out.imageSmoothingEnabled = false;
  out.drawImage(scratch, 0, 0, canvas.width, canvas.height);
}

function showValues(form) {
  for (const input of form.querySelectorAll("input[type=range]")) {
    input.nextElementSibling.textContent = Number(input.value).toFixed(2);
  }
}

function renderPhantom() {
  const form = document.getElementById("phantom-form");
  showValues(form);
  const f = form.elements;
  const pixels = render_phantom(
    BigInt(f.seed.value || 0), PHANTOM_SIZE, f.modality.value,
    Number(f.gamma.value), Number(f.gain.value), Number(f.bias.value), Number(f.noise.value));
  draw(document.getElementById("phantom-canvas"), pixels, PHANTOM_SIZE);
}

function renderModulation() {
  const form = document.getElementById("mod-form");
  showValues(form);
  const f = form.elements;
  const result = JSON.parse(modulate_phantom(
    BigInt(MOD_SEED), MOD_SIZE, MOD_MODALITY, Number(f.gamma.value), Number(f.beta.value)));
  draw(document.getElementById("mod-output"), result.image, MOD_SIZE);
  document.getElementById("mod-psnr").textContent = result.psnr.toFixed(2);
  document.getElementById("mod-ssim").textContent = result.ssim.toFixed(4);
}

const PALETTE = ["#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948",
                 "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac"];

function renderPlan(event) {
  event?.preventDefault();
  const f = document.getElementById("plan-form").elements;
  const out = document.getElementById("plan-output");
  out.replaceChildren();
  let view;
  try {
    view = JSON.parse(plan_batches(f.spec.value, Number(f.batch.value), Number(f.epoch.value)));
  } catch (err) {
    const p = document.createElement("p");
    p.className = "error";
    p.textContent = String(err);
    out.append(p);
    return;
  }
  const colour = new Map();
  view.groups.forEach((g, i) => colour.set(`${g.dataset}|${g.availability}`, PALETTE[i % PALETTE.length]));

  const summary = document.createElement("p");
  summary.textContent = `${view.samples} training slices in ${view.groups.length} groups → ` +
    `${view.batches.length} batches, ${view.padded} padding duplicates` +
    (view.problems.length ? `; problems: ${view.problems.join("; ")}` : "; all plan invariants hold");
  out.append(summary);

  const table = document.createElement("table");
  table.innerHTML = "<tr><th></th><th>dataset</th><th>availability</th><th>slices</th><th>batches</th></tr>";
  for (const g of view.groups) {
    const row = table.insertRow();
    const swatch = document.createElement("div");
    swatch.className = "cell";
    swatch.style.background = colour.get(`${g.dataset}|${g.availability}`);
    row.insertCell().append(swatch);
    for (const v of [g.dataset, g.availability, g.size, g.batches]) row.insertCell().textContent = v;
  }
  out.append(table);

  const heading = document.createElement("p");
  heading.textContent = "Epoch order (one row per batch; outlined cells are padding duplicates):";
  out.append(heading);
  for (const b of view.batches) {
    const row = document.createElement("div");
    row.className = "batch";
    for (const m of b.members) {
      const cell = document.createElement("div");
      cell.className = "cell" + (m.pad ? " pad" : "");
      cell.style.background = colour.get(`${b.dataset}|${b.availability}`);
      cell.title = m.pad ? `${m.id} (padding)` : m.id;
      row.append(cell);
    }
    out.append(row);
  }
}

await init();
draw(document.getElementById("mod-reference"),
     JSON.parse(modulate_phantom(BigInt(MOD_SEED), MOD_SIZE, MOD_MODALITY, 0, 0)).image, MOD_SIZE);
document.getElementById("phantom-form").addEventListener("input", renderPhantom);
document.getElementById("mod-form").addEventListener("input", renderModulation);
document.getElementById("plan-form").addEventListener("submit", renderPlan);
renderPhantom();
renderModulation();
renderPlan();
