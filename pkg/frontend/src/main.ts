import { App } from "./app.js";

const root = document.getElementById("app");
if (!root) throw new Error("page has no #app element");
new App(root).mount();
