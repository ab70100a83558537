/**
 * Page entry point. Loading worker.html runs this bundle, which connects to
 * the serving coordinator's /distributor endpoint and processes tickets until
 * told to stop. The only UI is a status strip counting processed tickets and
 * errors; a reload control (or any caught task error, after its error report)
 * reloads the page itself.
 */

import { WS_PATH } from './protocol';
import { SocketFactory } from './session';
import { renderStatus, runWorkerShell } from './shell';

const ENDPOINT_KEY = 'ticketgrid.endpoint'; // sessionStorage: redirects survive reloads

function deriveEndpoint(loc: Location): string {
  const scheme = loc.protocol === 'https:' ? 'wss:' : 'ws:';
  return `${scheme}//${loc.host}${WS_PATH}`;
}

const browserSocket: SocketFactory = (url, hooks) => {
  const ws = new WebSocket(url);
  ws.onopen = () => hooks.onOpen();
  ws.onmessage = (event) => {
    if (typeof event.data === 'string') {
      hooks.onMessage(event.data);
    } else {
      ws.close(); // the protocol is text frames only
    }
  };
  ws.onclose = (event) => hooks.onClose(`code ${event.code}`);
  ws.onerror = () => {
    // the close event that follows carries the report
  };
  return { send: (data) => ws.send(data), close: () => ws.close() };
};

export function boot(): void {
  const strip = document.getElementById('status');
  const show = (text: string) => {
    if (strip) strip.textContent = text;
  };
  const endpoint = window.sessionStorage.getItem(ENDPOINT_KEY) ?? deriveEndpoint(window.location);
  show('connecting…');
  void runWorkerShell({
    endpoint,
    makeSocket: browserSocket,
    fetchFn: (url) => fetch(url),
    userAgent: navigator.userAgent,
    onStats: (stats) => show(renderStatus(stats)),
    requestPageReload: () => window.location.reload(),
    rememberEndpoint: (url) => window.sessionStorage.setItem(ENDPOINT_KEY, url),
    log: (message) => console.log(`[worker] ${message}`),
  }).then((stats) => show(`${renderStatus(stats)}\nstopped`));
}

if (typeof document !== 'undefined') boot();
