import init, { Demo } from "./pkg/mwgs_web.js";

const $ = (id) => document.getElementById(id);
let demo;
let azimuth = 0.4;
let elevation = 0.3;

function blit(canvas, rgba, w, h) {
  canvas.width = w;
  canvas.height = h;
  canvas.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), w, h), 0, 0);
}

function drawMosaic() {
  blit($("mosaic"), demo.packetMosaic(+$("view").value, +$("level").value, $("db2").checked), demo.width(), demo.height());
}

function drawOrbit() {
  blit($("orbit"), demo.orbitRender(azimuth, elevation), demo.width(), demo.height());
  blit($("attention"), demo.attention(azimuth, elevation), demo.attentionWidth(), demo.attentionHeight());
  $("angles").textContent = `azimuth ${azimuth.toFixed(2)}, elevation ${elevation.toFixed(2)}`;
}

function load() {
  if (demo) demo.free();
  demo = new Demo(Math.max(0, +$("seed").value | 0));
  $("view").max = demo.viewCount() - 1;
  drawMosaic();
  drawOrbit();
}

let drag = null;
$("orbit").addEventListener("pointerdown", (e) => {
  drag = { x: e.clientX, y: e.clientY };
  e.target.setPointerCapture(e.pointerId);
});
$("orbit").addEventListener("pointerup", () => (drag = null));
$("orbit").addEventListener("pointermove", (e) => {
  if (!drag) return;
  azimuth -= (e.clientX - drag.x) * 0.01;
  elevation = Math.max(-1.4, Math.min(1.4, elevation + (e.clientY - drag.y) * 0.01));
  drag = { x: e.clientX, y: e.clientY };
  drawOrbit();
});
for (const id of ["view", "level", "db2"]) $(id).addEventListener("input", drawMosaic);
$("seed").addEventListener("change", load);

try {
  await init();
  load();
  $("status").textContent = "";
} catch (err) {
  $("status").textContent = String(err);
}
